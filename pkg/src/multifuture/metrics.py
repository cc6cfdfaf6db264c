"""Best-of-K displacement errors, fitted-Gaussian likelihood and collision rates."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from . import kernels
from .belief import GlobalGrid
from .data import SceneWindow

NLL_RIDGE = 1e-4
COLLISION_THRESHOLD = 0.2


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class MetricsReport:
    topk_ade: float
    topk_fde: float
    avg_nll: float
    col1_pct: float
    col2_pct: float
    k: int
    n_windows: int

    def record(self) -> str:
        return " ".join(f"{key}={value}" for key, value in asdict(self).items())

    def table(self) -> str:
        rows = [
            ("TopK ADE", f"{self.topk_ade:.4f}"),
            ("TopK FDE", f"{self.topk_fde:.4f}"),
            ("Avg NLL", f"{self.avg_nll:.4f}"),
            ("Col-I %", f"{self.col1_pct:.2f}"),
            ("Col-II %", f"{self.col2_pct:.2f}"),
            ("K", str(self.k)),
            ("windows", str(self.n_windows)),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    mean_err, _ = kernels.displacement_errors(np.asarray(pred)[None], gt)
    return float(mean_err.mean())


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    _, final_err = kernels.displacement_errors(np.asarray(pred)[None], gt)
    return float(final_err.mean())


def topk_metrics(samples: np.ndarray, gt: np.ndarray) -> tuple[float, float, int, int]:
    """Lowest scene-level ADE and FDE over K samples, with the winning indices.

    The two minima are taken independently and may come from different samples.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 4 or samples.shape[0] < 1:
        raise ValueError("samples must be K x P x T x 2 with K >= 1")
    mean_err, final_err = kernels.displacement_errors(samples, gt)
    ades = mean_err.mean(axis=1)
    fdes = final_err.mean(axis=1)
    i, j = int(np.argmin(ades)), int(np.argmin(fdes))
    return float(ades[i]), float(fdes[j]), i, j


def best_per_pedestrian(samples: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Each pedestrian's own lowest-ADE sample, shape P x T x 2."""
    samples = np.asarray(samples, dtype=np.float64)
    mean_err, _ = kernels.displacement_errors(samples, gt)
    best = np.argmin(mean_err, axis=0)
    return samples[best, np.arange(samples.shape[1])]


def avg_nll(samples: np.ndarray, gt: np.ndarray, ridge: float = NLL_RIDGE) -> float:
    """Mean log-density of the ground truth under per-step Gaussians fitted to the samples.

    Higher is better. Each pedestrian and step gets a bivariate Gaussian with the
    sample mean and the (unbiased) sample covariance plus ``ridge`` on the diagonal.
    """
    samples = np.asarray(samples, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    k = samples.shape[0]
    if k < 2:
        raise InsufficientSamplesError("need at least two samples to fit a covariance")
    mu = samples.mean(axis=0)
    centred = samples - mu[None]
    cov = np.einsum("kpti,kptj->ptij", centred, centred) / (k - 1)
    cov = cov + ridge * np.eye(2)
    a, b, d = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    det = a * d - b * b
    r = gt - mu
    maha = (d * r[..., 0] ** 2 - 2 * b * r[..., 0] * r[..., 1] + a * r[..., 1] ** 2) / det
    logp = -0.5 * maha - 0.5 * np.log(det) - math.log(2 * math.pi)
    return float(logp.mean())


def scene_collisions(best: np.ndarray, gt: np.ndarray, threshold: float = COLLISION_THRESHOLD) -> tuple[bool, bool]:
    """(Col-I, Col-II) flags for one scene.

    Col-I compares pedestrians' predictions with each other; Col-II compares
    each prediction with the other pedestrians' ground truth. Distances are
    taken at the same step; a collision is a distance below ``threshold``.
    """
    best = np.asarray(best, dtype=np.float64)
    p = best.shape[0]
    if p < 2:
        return False, False
    off = ~np.eye(p, dtype=bool)
    pred_pred = kernels.pair_min_distance(best, best)
    pred_gt = kernels.pair_min_distance(best, gt)
    return bool((pred_pred[off] < threshold).any()), bool((pred_gt[off] < threshold).any())


def collision_rates(
    scenes: Sequence[tuple[np.ndarray, np.ndarray]], threshold: float = COLLISION_THRESHOLD
) -> tuple[float, float]:
    """Percent of scenes with at least one Col-I / Col-II collision.

    ``scenes`` holds (best-of-K prediction, ground truth) pairs, each P x T x 2.
    """
    if not scenes:
        return 0.0, 0.0
    flags = np.array([scene_collisions(b, g, threshold) for b, g in scenes], dtype=float)
    return tuple(float(v) for v in 100.0 * flags.mean(axis=0))


def evaluate(
    windows: Sequence[SceneWindow],
    grid: GlobalGrid | None,
    model,
    k: int = 20,
    seed: int = 0,
    threshold: float = COLLISION_THRESHOLD,
    mode: str = "sample",
) -> tuple[MetricsReport, list[dict]]:
    """Roll out every window and aggregate; also returns the per-window rows."""
    from .model import rollout

    if not windows:
        raise ValueError("empty dataset")
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for i, w in enumerate(windows):
        samples = rollout(model, w, grid, k=k, gen=gen, mode=mode)
        gt = w.future
        t_ade, t_fde, _, _ = topk_metrics(samples, gt)
        nll = avg_nll(samples, gt) if k >= 2 else float("nan")
        c1, c2 = scene_collisions(best_per_pedestrian(samples, gt), gt, threshold)
        rows.append(dict(window_id=i, topk_ade=t_ade, topk_fde=t_fde, nll=nll, col1=int(c1), col2=int(c2)))
    return aggregate(rows, k), rows


def aggregate(rows: Sequence[dict], k: int) -> MetricsReport:
    col = lambda key: np.array([r[key] for r in rows], dtype=np.float64)
    return MetricsReport(
        topk_ade=float(col("topk_ade").mean()),
        topk_fde=float(col("topk_fde").mean()),
        avg_nll=float(col("nll").mean()),
        col1_pct=float(100.0 * col("col1").mean()),
        col2_pct=float(100.0 * col("col2").mean()),
        k=k,
        n_windows=len(rows),
    )


def write_rows(rows: Sequence[dict], stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=["window_id", "topk_ade", "topk_fde", "nll", "col1", "col2"])
    writer.writeheader()
    for r in rows:
        writer.writerow({key: (repr(v) if isinstance(v, float) else v) for key, v in r.items()})
