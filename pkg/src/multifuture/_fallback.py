"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def bin_indices(points, x_min, y_min, delta_x, delta_y, n, m):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ix = np.floor((pts[:, 0] - x_min) / delta_x)
    iy = np.floor((pts[:, 1] - y_min) / delta_y)
    ix = np.clip(np.nan_to_num(ix, nan=0.0), 0, n - 1).astype(np.int64)
    iy = np.clip(np.nan_to_num(iy, nan=0.0), 0, m - 1).astype(np.int64)
    return ix, iy


def neighbour_offsets(side):
    half = (side - 1) // 2
    rows, cols = np.divmod(np.arange(side * side), side)
    return cols - half, half - rows


def accumulate_heat(src, dst, x_min, y_min, delta_x, delta_y, n, m, side):
    """Sum exp(-distance) from each ``dst`` point to the neighbourhood centres of
    the bin holding the matching ``src`` point, in input order."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    maps = np.zeros((n, m, side * side))
    if len(src) == 0:
        return maps
    ix, iy = bin_indices(src, x_min, y_min, delta_x, delta_y, n, m)
    ox, oy = neighbour_offsets(side)
    cx = x_min + (ix[:, None] + ox[None, :] + 0.5) * delta_x
    cy = y_min + (iy[:, None] + oy[None, :] + 0.5) * delta_y
    heat = np.exp(-np.sqrt((dst[:, 0:1] - cx) ** 2 + (dst[:, 1:2] - cy) ** 2))
    np.add.at(maps, (ix, iy), heat)
    return maps


def displacement_errors(samples, gt):
    """Per-sample, per-pedestrian mean and final Euclidean errors, each K x P."""
    samples = np.asarray(samples, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    dist = np.sqrt(((samples - gt[None]) ** 2).sum(axis=-1))
    return dist.mean(axis=-1), dist[..., -1].copy()


def pair_min_distance(a, b):
    """P x P matrix of min over steps of |a_i(t) - b_j(t)|."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :, :] - b[None, :, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1)).min(axis=-1)
