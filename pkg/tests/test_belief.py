import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multifuture import kernels
from multifuture.belief import (
    DegenerateGridError,
    GlobalGrid,
    GridGeometry,
    build_global_grid,
    compute_grid_geometry,
    heat_accumulate,
    histogram_kl,
    load_grid,
    lookup_belief,
    lookup_beliefs,
    sample_candidate_map,
    save_grid,
)
from multifuture.data import SynthSpec, synth_generate

CENTRE, EAST, NORTH = 12, 13, 7


def straight_track():
    return [np.column_stack([np.arange(11.0), np.zeros(11)])]


def random_corpus(seed, n=6, length=15):
    rng = np.random.default_rng(seed)
    return [np.cumsum(rng.normal(0.3, 0.5, size=(length, 2)), axis=0) + rng.uniform(-3, 3, 2) for _ in range(n)]


def brute_force_grid(trajectories, g: GridGeometry):
    """Literal per-bin scan over every trajectory point."""
    maps = np.zeros((g.n, g.m, g.side * g.side))
    half = g.side // 2
    for bx in range(g.n):
        for by in range(g.m):
            for traj in trajectories:
                for i in range(len(traj) - 1):
                    x, y = traj[i]
                    ix = min(max(int(math.floor((x - g.x_min) / g.delta_x)), 0), g.n - 1)
                    iy = min(max(int(math.floor((y - g.y_min) / g.delta_y)), 0), g.m - 1)
                    if (ix, iy) != (bx, by):
                        continue
                    nx, ny = traj[i + 1]
                    for r in range(g.side):
                        for c in range(g.side):
                            cx = g.x_min + (bx + c - half + 0.5) * g.delta_x
                            cy = g.y_min + (by + half - r + 0.5) * g.delta_y
                            maps[bx, by, r * g.side + c] += math.exp(-math.hypot(nx - cx, ny - cy))
            s = maps[bx, by].sum()
            if s > 0:
                maps[bx, by] /= s
    return maps


# -- geometry ---------------------------------------------------------------------


def test_geometry_straight_line():
    g = compute_grid_geometry(straight_track())
    assert g.n == 20
    assert g.delta_x == 0.5
    assert g.m == 1 and g.delta_y == 0.5


def test_geometry_mu_sigma_half():
    # steps alternate 0 and 1: mean 0.5, population std 0.5, extent 10
    xs = np.repeat(np.arange(11.0), 2)
    g = compute_grid_geometry([np.column_stack([xs, np.zeros_like(xs)])])
    assert g.n == math.floor(10 / 0.5) == 20


def test_geometry_degenerate():
    with pytest.raises(DegenerateGridError):
        compute_grid_geometry([np.ones((5, 2))])
    with pytest.raises(DegenerateGridError):
        compute_grid_geometry([np.zeros((1, 2))])


def test_geometry_per_axis():
    track = np.column_stack([np.arange(11.0), 0.5 * np.arange(11.0)])
    g = compute_grid_geometry([track], per_axis=True)
    # per-axis cells: x (1+0)/2, y (0.5+0)/2 over extents 10 and 5
    assert (g.n, g.m) == (20, 20)
    pooled = compute_grid_geometry([track])
    assert pooled.n == math.floor(10 / (math.hypot(1, 0.5) / 2))


def test_geometry_rejects_even_side():
    with pytest.raises(DegenerateGridError):
        compute_grid_geometry(straight_track(), side=4)


# -- accumulation -------------------------------------------------------------------


def test_heat_accumulate_values():
    centres = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    acc = heat_accumulate((0.0, 0.0), centres, np.zeros(3))
    assert acc[0] == 1.0
    assert acc[1] == pytest.approx(0.36787944117144233, abs=1e-15)
    assert acc[1] == acc[2]


def test_heat_accumulate_commutes():
    rng = np.random.default_rng(3)
    centres = rng.normal(size=(25, 2))
    pts = rng.normal(size=(4, 2))
    a = np.zeros(25)
    for p in pts:
        a = heat_accumulate(p, centres, a)
    b = np.zeros(25)
    for p in pts[::-1]:
        b = heat_accumulate(p, centres, b)
    np.testing.assert_allclose(a, b, rtol=1e-15)


def test_single_eastward_transition():
    g = GridGeometry(0.0, 0.0, 10.0, 10.0, 10, 10, 1.0, 1.0, 5)
    grid = build_global_grid([np.array([[4.5, 4.5], [5.5, 4.5]])], g)
    m = grid.maps[4, 4]
    assert np.argmax(m) == EAST
    # hand evaluation: the end point sits on the east centre, so that cell gets exp(0)
    expected = np.array([math.exp(-math.hypot(c - 3, r)) for r in (2, 1, 0, -1, -2) for c in range(5)])
    np.testing.assert_allclose(m, expected / expected.sum(), rtol=1e-12)
    assert grid.maps.sum() == pytest.approx(1.0)


def test_empty_corpus_gives_zero_maps():
    g = GridGeometry(0.0, 0.0, 4.0, 4.0, 4, 4, 1.0, 1.0, 5)
    assert not build_global_grid([], g).maps.any()


def test_grid_matches_brute_force():
    corpus = random_corpus(0)
    g = compute_grid_geometry(corpus)
    grid = build_global_grid(corpus, g)
    np.testing.assert_allclose(grid.maps, brute_force_grid(corpus, g), rtol=0, atol=1e-12)


def test_grid_duplicate_corpus_invariant():
    corpus = random_corpus(1)
    g = compute_grid_geometry(corpus)
    a = build_global_grid(corpus, g).maps
    b = build_global_grid(corpus + corpus, g).maps
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.randoms())
def test_grid_order_invariant_bit_exact(seed, rnd):
    corpus = random_corpus(seed, n=5, length=8)
    g = compute_grid_geometry(corpus)
    shuffled = list(corpus)
    rnd.shuffle(shuffled)
    a = build_global_grid(corpus, g).maps
    b = build_global_grid(shuffled, g).maps
    assert np.array_equal(a, b)
    sums = a.sum(axis=-1)
    nonempty = sums > 0
    np.testing.assert_allclose(sums[nonempty], 1.0, atol=1e-6)
    assert (a >= 0).all()


def test_backends_agree():
    backs = kernels.backends()
    if len(backs) < 2:
        pytest.skip("compiled kernels not built")
    corpus = random_corpus(4, n=20, length=30)
    g = compute_grid_geometry(corpus)
    src = np.concatenate([t[:-1] for t in corpus])
    dst = np.concatenate([t[1:] for t in corpus])
    args = (g.x_min, g.y_min, g.delta_x, g.delta_y, g.n, g.m, g.side)
    a = backs["python"].accumulate_heat(src, dst, *args)
    b = backs["cython"].accumulate_heat(src, dst, *args)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-300)
    pts = np.random.default_rng(0).uniform(-20, 20, size=(500, 2))
    for x, y in zip(backs["python"].bin_indices(pts, *args[:6]), backs["cython"].bin_indices(pts, *args[:6])):
        np.testing.assert_array_equal(x, y)


# -- lookup ---------------------------------------------------------------------------


@pytest.fixture
def east_grid():
    g = GridGeometry(0.0, 0.0, 10.0, 10.0, 10, 10, 1.0, 1.0, 5)
    return build_global_grid([np.array([[4.5, 4.5], [5.5, 4.5]])], g)


def test_lookup_trained_bin(east_grid):
    np.testing.assert_array_equal(lookup_belief(east_grid, (4.2, 4.9)), east_grid.maps[4, 4])


def test_lookup_clamps_outside(east_grid):
    np.testing.assert_array_equal(lookup_belief(east_grid, (-50.0, 4.5)), lookup_belief(east_grid, (0.1, 4.5)))
    np.testing.assert_array_equal(lookup_belief(east_grid, (1e9, 1e9)), lookup_belief(east_grid, (9.9, 9.9)))


def test_lookup_unvisited_is_uniform(east_grid):
    np.testing.assert_array_equal(lookup_belief(east_grid, (0.5, 0.5)), np.full(25, 0.04))


@settings(max_examples=100, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=True), st.floats(allow_nan=False, allow_infinity=True))
def test_lookup_total(x, y):
    g = GridGeometry(0.0, 0.0, 10.0, 10.0, 10, 10, 1.0, 1.0, 5)
    grid = GlobalGrid(g, np.random.default_rng(0).dirichlet(np.ones(25), size=100))
    m = lookup_belief(grid, (x, y))
    assert m.shape == (25,) and (m >= 0).all()
    assert m.sum() == pytest.approx(1.0, abs=1e-12)


# -- candidate maps and divergence ----------------------------------------------------------


def test_candidate_map_identical_samples():
    g = GridGeometry(0.0, 0.0, 10.0, 10.0, 10, 10, 1.0, 1.0, 5)
    prev = np.array([4.5, 4.5])
    samples = np.tile([0.0, 1.0], (100, 1))  # every sample lands on the north centre
    m = sample_candidate_map(samples, prev, g)
    assert np.argmax(m) == NORTH
    expected = np.array([math.exp(-math.hypot(c - 2, r - 1)) for r in (2, 1, 0, -1, -2) for c in range(5)])
    np.testing.assert_allclose(m, expected / expected.sum(), rtol=1e-12)


def test_candidate_map_symmetric_samples():
    g = GridGeometry(0.0, 0.0, 10.0, 10.0, 10, 10, 1.0, 1.0, 5)
    rng = np.random.default_rng(2)
    half = rng.normal(0, 0.7, size=(50, 2))
    samples = np.concatenate([half, half * [-1, 1]])  # mirrored about the vertical axis
    m = sample_candidate_map(samples, (4.5, 4.5), g).reshape(5, 5)
    np.testing.assert_allclose(m, m[:, ::-1], atol=1e-6)


def test_candidate_map_single_sample_definition():
    g = GridGeometry(0.0, 0.0, 10.0, 10.0, 10, 10, 1.0, 1.0, 5)
    prev = np.array([3.3, 6.1])
    d = np.array([0.4, -0.7])
    centres = g.neighbour_centres(prev)[0]
    acc = heat_accumulate(prev + d, centres, np.zeros(25))
    np.testing.assert_allclose(sample_candidate_map(d[None], prev, g), acc / acc.sum(), rtol=1e-15)


def test_histogram_kl_values():
    p = np.random.default_rng(0).dirichlet(np.ones(25))
    assert histogram_kl(p, p) == 0.0
    onehot = np.eye(25)[3]
    assert histogram_kl(onehot, np.full(25, 0.04)) == pytest.approx(math.log(25), abs=1e-5)


def test_histogram_kl_nonnegative_many_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p, q = rng.dirichlet(np.full(25, 0.5), size=2)
        assert histogram_kl(p, q) >= 0.0
    assert histogram_kl(np.eye(25)[0], np.eye(25)[1]) > 1.0


# -- file format --------------------------------------------------------------------------


def test_grid_file_roundtrip(tmp_path):
    scene = synth_generate(SynthSpec("t_junction", n_peds=2, n_windows=6, noise_std=0.05, seed=9))
    tracks = scene.tracks()
    grid = build_global_grid(tracks, compute_grid_geometry(tracks))
    path = tmp_path / "g.txt"
    save_grid(grid, path)
    back = load_grid(path)
    assert back.geometry == grid.geometry
    assert np.array_equal(back.maps, grid.maps)
    save_grid(back, tmp_path / "g2.txt")
    assert (tmp_path / "g2.txt").read_bytes() == path.read_bytes()
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + grid.geometry.n * grid.geometry.m
    assert all(len(line.split()) == 25 for line in lines[1:])


def test_grid_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("hello\n")
    with pytest.raises(ValueError):
        load_grid(path)


def test_lookup_many_matches_single(east_grid):
    pts = np.random.default_rng(5).uniform(-2, 12, size=(50, 2))
    many = lookup_beliefs(east_grid, pts)
    for p, m in zip(pts, many):
        np.testing.assert_array_equal(m, lookup_belief(east_grid, p))
