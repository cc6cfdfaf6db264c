"""Global grid of local transition histograms ("belief maps").

The scene is tiled into ``N x M`` bins. Each bin owns an ``L x L`` histogram
over the bins surrounding it; a training transition starting in the bin adds
``exp(-distance)`` from its end point to every neighbourhood centre.
Histogram cells run row-major from north-west to south-east, so cell
``(L*L - 1) // 2`` is the bin itself and cell ``+1`` its east neighbour.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels

GRID_FORMAT = "multifuture-grid"
GRID_VERSION = 1
KL_EPS = 1e-8


class DegenerateGridError(ValueError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    n: int
    m: int
    delta_x: float
    delta_y: float
    side: int = 5

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise DegenerateGridError("grid needs at least one bin per axis")
        if self.side < 1 or self.side % 2 == 0:
            raise DegenerateGridError(f"belief map side must be odd, got {self.side}")
        if not (self.delta_x > 0 and self.delta_y > 0):
            raise DegenerateGridError("bin sizes must be positive")

    @property
    def cells(self) -> int:
        return self.side * self.side

    def bin_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return kernels.bin_indices(
            points, self.x_min, self.y_min, self.delta_x, self.delta_y, self.n, self.m
        )

    def neighbour_centres(self, points: np.ndarray) -> np.ndarray:
        """Centres of the L x L bins around each point's bin, shape (n, L*L, 2)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        ix, iy = self.bin_of(pts)
        ox, oy = kernels.neighbour_offsets(self.side)
        cx = self.x_min + (ix[:, None] + ox[None, :] + 0.5) * self.delta_x
        cy = self.y_min + (iy[:, None] + oy[None, :] + 0.5) * self.delta_y
        return np.stack([cx, cy], axis=-1)


@dataclass
class GlobalGrid:
    geometry: GridGeometry
    maps: np.ndarray  # (N, M, L*L)

    def __post_init__(self):
        g = self.geometry
        self.maps = np.asarray(self.maps, dtype=np.float64).reshape(g.n, g.m, g.cells)


def _transitions(trajectories: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    src, dst = [], []
    for traj in trajectories:
        t = np.asarray(traj, dtype=np.float64).reshape(-1, 2)
        if len(t) >= 2:
            src.append(t[:-1])
            dst.append(t[1:])
    if not src:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.concatenate(src), np.concatenate(dst)


def compute_grid_geometry(
    trajectories: Sequence[np.ndarray], side: int = 5, per_axis: bool = False
) -> GridGeometry:
    """Size the global grid from the corpus extent and step statistics.

    Bin count per axis is ``floor(extent / ((mu + sigma) / 2))`` where ``mu`` and
    ``sigma`` are mean and standard deviation of step lengths (or of absolute
    per-axis steps with ``per_axis``). An axis with zero extent gets a single
    bin one cell wide, centred on the data.
    """
    pts = [np.asarray(t, dtype=np.float64).reshape(-1, 2) for t in trajectories]
    pts = [p for p in pts if len(p)]
    if not pts:
        raise DegenerateGridError("no points")
    allp = np.concatenate(pts)
    src, dst = _transitions(pts)
    if len(src) == 0:
        raise DegenerateGridError("need at least one displacement")
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    extent = hi - lo
    if not np.any(extent > 0):
        raise DegenerateGridError("all points identical (zero extent)")

    step = dst - src
    if per_axis:
        mag = np.abs(step)
        cell = (mag.mean(axis=0) + mag.std(axis=0)) / 2.0
    else:
        mag = np.hypot(step[:, 0], step[:, 1])
        cell = np.full(2, (mag.mean() + mag.std()) / 2.0)
    if not np.all(cell > 0):
        raise DegenerateGridError("mean step length is zero")

    counts, lo_out, hi_out = [], [], []
    for axis in range(2):
        if extent[axis] > 0:
            counts.append(max(1, math.floor(extent[axis] / cell[axis])))
            lo_out.append(float(lo[axis]))
            hi_out.append(float(hi[axis]))
        else:
            counts.append(1)
            lo_out.append(float(lo[axis] - cell[axis] / 2))
            hi_out.append(float(hi[axis] + cell[axis] / 2))
    n, m = counts
    return GridGeometry(
        x_min=lo_out[0],
        y_min=lo_out[1],
        x_max=hi_out[0],
        y_max=hi_out[1],
        n=n,
        m=m,
        delta_x=(hi_out[0] - lo_out[0]) / n,
        delta_y=(hi_out[1] - lo_out[1]) / m,
        side=side,
    )


def heat_accumulate(next_coord, centres: np.ndarray, acc: np.ndarray) -> np.ndarray:
    """Add exp(-distance) from ``next_coord`` to each centre into ``acc``."""
    c = np.asarray(centres, dtype=np.float64).reshape(-1, 2)
    p = np.asarray(next_coord, dtype=np.float64).reshape(2)
    return acc + np.exp(-np.sqrt(((c - p) ** 2).sum(axis=1)))


def normalize_maps(maps: np.ndarray) -> np.ndarray:
    total = maps.sum(axis=-1, keepdims=True)
    return np.divide(maps, total, out=np.zeros_like(maps), where=total > 0)


def build_global_grid(trajectories: Sequence[np.ndarray], geometry: GridGeometry) -> GlobalGrid:
    src, dst = _transitions(trajectories)
    # canonical order makes the floating-point sums independent of input order
    order = np.lexsort((dst[:, 1], dst[:, 0], src[:, 1], src[:, 0]))
    g = geometry
    raw = kernels.accumulate_heat(
        src[order], dst[order], g.x_min, g.y_min, g.delta_x, g.delta_y, g.n, g.m, g.side
    )
    return GlobalGrid(g, normalize_maps(raw))


def lookup_beliefs(grid: GlobalGrid, points: np.ndarray) -> np.ndarray:
    """Belief maps for many positions, shape (n, L*L); empty bins read as uniform."""
    ix, iy = grid.geometry.bin_of(points)
    out = grid.maps[ix, iy].copy()
    empty = ~(out.sum(axis=1) > 0)
    out[empty] = 1.0 / grid.geometry.cells
    return out


def lookup_belief(grid: GlobalGrid, position) -> np.ndarray:
    return lookup_beliefs(grid, np.asarray(position, dtype=np.float64).reshape(1, 2))[0]


def sample_candidate_map(samples: np.ndarray, position_prev, geometry: GridGeometry) -> np.ndarray:
    """Histogram of sampled next positions over the neighbourhood of ``position_prev``."""
    disp = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(disp) == 0:
        raise ValueError("need at least one sample")
    prev = np.asarray(position_prev, dtype=np.float64).reshape(2)
    centres = geometry.neighbour_centres(prev)[0]
    nxt = prev + disp
    acc = np.exp(-np.sqrt(((nxt[:, None, :] - centres[None]) ** 2).sum(axis=-1))).sum(axis=0)
    return acc / acc.sum()


def histogram_kl(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> float:
    """KL(p || q) between eps-smoothed, renormalised histograms."""
    ps = np.asarray(p, dtype=np.float64) + eps
    qs = np.asarray(q, dtype=np.float64) + eps
    ps = ps / ps.sum()
    qs = qs / qs.sum()
    return float(max(0.0, np.sum(ps * np.log(ps / qs))))


def save_grid(grid: GlobalGrid, path) -> None:
    g = grid.geometry
    header = [GRID_FORMAT, str(GRID_VERSION)]
    header += [repr(float(v)) for v in (g.x_min, g.y_min, g.x_max, g.y_max)]
    header += [str(g.n), str(g.m), repr(float(g.delta_x)), repr(float(g.delta_y)), str(g.side)]
    lines = [" ".join(header)]
    for row in grid.maps.reshape(g.n * g.m, g.cells):
        lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_grid(path) -> GlobalGrid:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 11 or header[0] != GRID_FORMAT:
            raise ValueError(f"{path}: not a grid file")
        if int(header[1]) != GRID_VERSION:
            raise ValueError(f"{path}: unsupported grid version {header[1]}")
        x_min, y_min, x_max, y_max = map(float, header[2:6])
        n, m = int(header[6]), int(header[7])
        dx, dy = float(header[8]), float(header[9])
        side = int(header[10])
        geom = GridGeometry(x_min, y_min, x_max, y_max, n, m, dx, dy, side)
        rows = [list(map(float, line.split())) for line in fh if line.strip()]
    maps = np.asarray(rows, dtype=np.float64)
    if maps.shape != (n * m, side * side) or (maps < 0).any():
        raise ValueError(f"{path}: expected {n * m} rows of {side * side} non-negative values")
    return GlobalGrid(geom, maps)
