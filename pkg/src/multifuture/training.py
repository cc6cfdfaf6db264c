"""Loss assembly, optimisation loop, config files and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch

from .belief import GlobalGrid
from .data import SceneWindow
from .model import (
    DTYPE,
    ACVRNN,
    GaussianParams,
    ModelConfig,
    NumericError,
    PreparedWindow,
    StepTerms,
    collate,
    gaussian_kl_rows,
    gaussian_nll_rows,
    histogram_kl_rows,
    prepare_window,
    window_terms,
)

CHECKPOINT_MAGIC = b"MULTIFUTURE-CKPT\n"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("epoch", "nll", "kl_latent", "kl_belief", "total", "kl_weight", "val_total", "wall_time_s")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 500
    warmup_epochs: int = 50
    belief_weight: float = 100.0
    grad_clip: float = 10.0
    map_samples: int = 100
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("invalid training schedule")
        if self.belief_weight < 0 or self.grad_clip <= 0 or self.map_samples < 0:
            raise ValueError("belief_weight, grad_clip and map_samples must be non-negative")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is implemented")


@dataclass
class LossBreakdown:
    nll: float
    kl_latent: float
    kl_belief: float
    total: float
    kl_weight: float


def gaussian_nll(x: torch.Tensor, g: GaussianParams) -> torch.Tensor:
    return gaussian_nll_rows(x, g).sum()


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    return gaussian_kl_rows(q, p).sum()


def kl_warmup_weight(epoch: float, warmup_epochs: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if warmup_epochs <= 0:
        return 1.0
    return min(epoch / warmup_epochs, 1.0)


def belief_kl_term(b_true: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
    return histogram_kl_rows(b_true, candidate)


def total_loss(
    terms: Sequence[StepTerms],
    epoch: float,
    cfg: TrainConfig,
    weights: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Summed-over-time, pedestrian-weighted objective to minimise.

    ``weights`` default to a plain mean over pedestrians.
    """
    if not terms:
        zero = torch.zeros((), dtype=DTYPE)
        return zero, LossBreakdown(0.0, 0.0, 0.0, 0.0, kl_warmup_weight(epoch, cfg.warmup_epochs))
    if weights is None:
        n = terms[0].nll.shape[0]
        weights = torch.full((n,), 1.0 / n, dtype=DTYPE)
    nll = sum((t.nll * weights).sum() for t in terms)
    kl = sum((t.kl_latent * weights).sum() for t in terms)
    kl_b = sum((t.kl_belief * weights).sum() for t in terms)
    w = kl_warmup_weight(epoch, cfg.warmup_epochs)
    total = nll + w * kl + cfg.belief_weight * kl_b
    return total, LossBreakdown(*(float(v.detach()) for v in (nll, kl, kl_b, total)), w)


def batch_loss(
    model: ACVRNN,
    windows: Sequence[PreparedWindow],
    epoch: float,
    cfg: TrainConfig,
    gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    batch, weights = collate(windows)
    samples = cfg.map_samples if cfg.belief_weight > 0 else 0
    return total_loss(window_terms(model, batch, gen, samples), epoch, cfg, weights)


def make_optimizer(model: ACVRNN, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def train_epoch(
    dataset: Sequence[PreparedWindow],
    model: ACVRNN,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    epoch: int,
    gen: torch.Generator,
) -> LossBreakdown:
    """One pass over ``dataset`` in shuffled minibatches; returns the mean breakdown."""
    if not dataset:
        raise ValueError("empty dataset")
    model.train()
    order = torch.randperm(len(dataset), generator=gen).tolist()
    parts = []
    for at in range(0, len(order), cfg.batch_size):
        chunk = [dataset[i] for i in order[at : at + cfg.batch_size]]
        loss, parts_i = batch_loss(model, chunk, epoch, cfg, gen)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {epoch}: {parts_i}")
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        parts.append(parts_i)
    return LossBreakdown(*(float(np.mean([getattr(p, f) for p in parts])) for f in ("nll", "kl_latent", "kl_belief", "total", "kl_weight")))


def validation_loss(
    model: ACVRNN, dataset: Sequence[PreparedWindow], cfg: TrainConfig, seed: int | None = None
) -> float:
    """Full-weight objective in inference mode, summed over minibatches.

    Latent draws come from a generator seeded with ``seed`` (default
    ``cfg.seed``) so values from different epochs are comparable.
    """
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with torch.no_grad():
            for at in range(0, len(dataset), cfg.batch_size):
                loss, _ = batch_loss(model, dataset[at : at + cfg.batch_size], float(cfg.warmup_epochs), cfg, gen)
                total += float(loss)
    finally:
        model.train(was_training)
    return total


def fit(
    windows: Sequence[SceneWindow],
    grid: GlobalGrid | None,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    log=None,
    model: ACVRNN | None = None,
    validation: Sequence[SceneWindow] | None = None,
) -> tuple[ACVRNN, list[LossBreakdown]]:
    """Build (or continue) a model and train it for ``cfg.epochs`` epochs.

    ``log`` may be a text stream; one CSV row per epoch is written to it.
    With ``validation`` windows the parameters with the lowest validation
    loss are kept instead of the last ones.
    """
    torch.manual_seed(cfg.seed)
    model = model or ACVRNN(model_cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    dataset = [prepare_window(w, grid, model_cfg) for w in windows]
    held_out = [prepare_window(w, grid, model_cfg) for w in validation] if validation else []
    optimizer = make_optimizer(model, cfg)
    writer = None
    if log is not None:
        writer = csv.writer(log)
        writer.writerow(LOG_FIELDS)
    history = []
    best, best_state = math.inf, None
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        parts = train_epoch(dataset, model, optimizer, cfg, epoch, gen)
        history.append(parts)
        val = ""
        if held_out:
            val = validation_loss(model, held_out, cfg)
            if val < best:
                best = val
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if writer is not None:
            writer.writerow(
                [epoch, parts.nll, parts.kl_latent, parts.kl_belief, parts.total, parts.kl_weight, val,
                 round(time.perf_counter() - start, 3)]
            )
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


# -- config files ------------------------------------------------------------------


def _coerce(value: str, kind):
    if kind in (bool, "bool"):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value.strip()


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_configs(values: dict) -> tuple[ModelConfig, TrainConfig]:
    """Split flat key/value pairs into the two config objects, coercing types."""
    buckets = {ModelConfig: {}, TrainConfig: {}}
    for key, value in values.items():
        for cls, bucket in buckets.items():
            match = {f.name: f.type for f in fields(cls)}
            if key in match:
                bucket[key] = _coerce(value, match[key]) if isinstance(value, str) else value
                break
        else:
            raise ValueError(f"unknown config key {key!r}")
    return ModelConfig(**buckets[ModelConfig]), TrainConfig(**buckets[TrainConfig])


def format_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in asdict(model_cfg).items()]
    lines += [f"{k} = {v}" for k, v in asdict(train_cfg).items()]
    return "\n".join(lines) + "\n"


# -- checkpoints -----------------------------------------------------------------------


def save_checkpoint(model: ACVRNN, path, train_cfg: TrainConfig | None = None) -> None:
    """Write a header line of JSON metadata followed by raw little-endian arrays."""
    state = model.state_dict()
    names = sorted(state)
    entries, blobs, offset = [], [], 0
    for name in names:
        arr = state[name].detach().cpu().numpy()
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "tensors": entries,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ACVRNN, TrainConfig | None]:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        header = json.loads(fh.readline())
        payload = fh.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    model = ACVRNN(ModelConfig.from_dict(header["model_config"]))
    state = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        state[e["name"]] = torch.as_tensor(arr.astype(arr.dtype.newbyteorder("=")))
    model.load_state_dict(state)
    model.eval()
    tc = header.get("train_config")
    return model, (TrainConfig(**tc) if tc else None)
