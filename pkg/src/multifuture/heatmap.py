"""Density grids of sampled future positions."""
from __future__ import annotations

import csv

import numpy as np


def density_grid(points: np.ndarray, bounds, resolution=(50, 50)):
    """Normalised 2-D histogram of ``points`` over ``bounds = (x0, y0, x1, y1)``.

    Returns ``(density, x_edges, y_edges)``; ``density[i, j]`` is the mass in
    x-bin ``i`` and y-bin ``j`` and the whole grid sums to 1. Points outside the
    bounds are dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("need at least one point")
    x0, y0, x1, y1 = map(float, bounds)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("bounds must have positive area")
    nx, ny = resolution
    hist, xe, ye = np.histogram2d(pts[:, 0], pts[:, 1], bins=(nx, ny), range=((x0, x1), (y0, y1)))
    total = hist.sum()
    if total == 0:
        raise ValueError("no points inside the bounds")
    return hist / total, xe, ye


def bounds_of(points: np.ndarray, margin: float = 0.05):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = np.maximum((hi - lo) * margin, 1e-3)
    return (lo[0] - pad[0], lo[1] - pad[1], hi[0] + pad[0], hi[1] + pad[1])


def write_density_csv(density, x_edges, y_edges, stream) -> None:
    w = csv.writer(stream)
    w.writerow(["x_lo", "x_hi", "y_lo", "y_hi", "density"])
    for i in range(density.shape[0]):
        for j in range(density.shape[1]):
            w.writerow([repr(float(x_edges[i])), repr(float(x_edges[i + 1])),
                        repr(float(y_edges[j])), repr(float(y_edges[j + 1])), repr(float(density[i, j]))])


def read_density_csv(stream, shape) -> np.ndarray:
    rows = list(csv.DictReader(stream))
    return np.array([float(r["density"]) for r in rows]).reshape(shape)


def render_png(density, x_edges, y_edges, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(
        density.T,
        origin="lower",
        extent=(x_edges[0], x_edges[-1], y_edges[0], y_edges[-1]),
        cmap="inferno",
        aspect="auto",
    )
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
