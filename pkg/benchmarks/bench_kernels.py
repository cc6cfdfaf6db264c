"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from multifuture import kernels


def workloads(rng):
    tracks = np.cumsum(rng.normal(0.2, 0.5, size=(400, 20, 2)), axis=1)
    src = tracks[:, :-1].reshape(-1, 2)
    dst = tracks[:, 1:].reshape(-1, 2)
    lo = tracks.reshape(-1, 2).min(axis=0)
    grid = (lo[0], lo[1], 0.3, 0.3, 60, 60)
    samples = rng.normal(size=(20, 8, 12, 2))
    gt = rng.normal(size=(8, 12, 2))
    return {
        "bin_indices (7600 pts)": lambda m: m.bin_indices(src, *grid),
        "accumulate_heat (7600 transitions, L=5)": lambda m: m.accumulate_heat(src, dst, *grid, 5),
        "displacement_errors (K=20, P=8, T=12)": lambda m: m.displacement_errors(samples, gt),
        "pair_min_distance (P=8, T=12)": lambda m: m.pair_min_distance(gt, gt),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available")
    print(f"active backend: {kernels.BACKEND}")
    rng = np.random.default_rng(0)
    names = list(backends)
    print(f"{'kernel':<42}" + "".join(f"{n:>12}" for n in names) + ("     speed-up" if len(names) > 1 else ""))
    for label, fn in workloads(rng).items():
        times = []
        for name in names:
            impl = backends[name]
            timer = timeit.Timer(lambda: fn(impl))
            number, _ = timer.autorange()
            times.append(min(timer.repeat(args.repeat, number)) / number)
        row = f"{label:<42}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>12.1f}x"
        print(row)


if __name__ == "__main__":
    main()
