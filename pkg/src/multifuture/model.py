"""Attentive conditional VRNN over pedestrian displacements."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .belief import KL_EPS, GlobalGrid, lookup_beliefs
from .data import SceneWindow
from .graph import ADJACENCY_MODES, GraphAttention, build_adjacency, refine_hidden

INIT_MODES = ("zero", "learned", "absolute")
DTYPE = torch.float64


class NumericError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 2
    feature_dim: int = 64
    hidden_dim: int = 64
    latent_dim: int = 16
    side: int = 5
    gru_layers: int = 1
    heads: int = 4
    head_dim: int = 8
    decoder_mean_clip: float = 10.0
    logvar_clip: float = 10.0
    adjacency: str = "similarity"
    sigma: float = 1.0
    knn_k: int = 3
    init_mode: str = "absolute"
    belief: bool = True

    def __post_init__(self):
        for name in ("input_dim", "feature_dim", "hidden_dim", "latent_dim", "side", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.gru_layers != 1:
            raise ValueError("only a single recurrent layer is supported")
        if not (self.decoder_mean_clip > 0 and self.logvar_clip > 0 and self.sigma > 0):
            raise ValueError("clips and sigma must be positive")
        if self.adjacency not in ADJACENCY_MODES:
            raise ValueError(f"adjacency must be one of {ADJACENCY_MODES}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")

    @property
    def belief_dim(self) -> int:
        return self.side * self.side

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class GaussianParams(NamedTuple):
    mean: torch.Tensor
    log_var: torch.Tensor


class StepTerms(NamedTuple):
    nll: torch.Tensor  # (P,)
    kl_latent: torch.Tensor  # (P,)
    kl_belief: torch.Tensor  # (P,)


def _mlp(sizes: Sequence[int], slope: float = 0.01) -> nn.Sequential:
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [nn.Linear(a, b), nn.LeakyReLU(slope)]
    return nn.Sequential(*layers)


def reparameterize(g: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    return g.mean + torch.exp(0.5 * g.log_var) * noise


def gaussian_nll_rows(x: torch.Tensor, g: GaussianParams) -> torch.Tensor:
    """Negative log density of ``x`` under a diagonal Gaussian, summed over the last axis."""
    return 0.5 * (math.log(2 * math.pi) + g.log_var + (x - g.mean) ** 2 / torch.exp(g.log_var)).sum(-1)


def gaussian_kl_rows(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    return 0.5 * (
        p.log_var - q.log_var + (torch.exp(q.log_var) + (q.mean - p.mean) ** 2) / torch.exp(p.log_var) - 1.0
    ).sum(-1)


def soft_candidate_map(next_positions: torch.Tensor, centres: torch.Tensor) -> torch.Tensor:
    """Normalised heat histogram of sampled next positions.

    ``next_positions`` is (P, n, 2), ``centres`` (P, C, 2); returns (P, C).
    """
    dist = torch.linalg.vector_norm(next_positions[:, :, None, :] - centres[:, None, :, :], dim=-1)
    heat = torch.exp(-dist).sum(dim=1)
    return heat / heat.sum(dim=-1, keepdim=True)


def histogram_kl_rows(p: torch.Tensor, q: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    ps = p + eps
    qs = q + eps
    ps = ps / ps.sum(-1, keepdim=True)
    qs = qs / qs.sum(-1, keepdim=True)
    return (ps * torch.log(ps / qs)).sum(-1)


def _check_finite(*tensors) -> None:
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise NumericError("non-finite input")


def _noise(shape, gen: torch.Generator | None) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=DTYPE)


class ACVRNN(nn.Module):
    """Conditional VRNN whose hidden states are refined by graph attention."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        fd, hd, zd, bd = cfg.feature_dim, cfg.hidden_dim, cfg.latent_dim, cfg.belief_dim
        self.phi_x = _mlp([cfg.input_dim, fd, fd])
        self.phi_b = _mlp([bd, fd])
        self.phi_z = _mlp([zd, fd])
        self.prior = _mlp([hd + fd, fd])
        self.prior_mean = nn.Linear(fd, zd)
        self.prior_logvar = nn.Linear(fd, zd)
        self.enc = _mlp([fd + hd + fd, fd, fd])
        self.enc_mean = nn.Linear(fd, zd)
        self.enc_logvar = nn.Linear(fd, zd)
        self.dec = _mlp([fd + hd + fd, fd, fd])
        self.dec_mean = nn.Linear(fd, cfg.input_dim)
        self.dec_logvar = nn.Linear(fd, cfg.input_dim)
        self.rnn = nn.GRUCell(fd + fd, hd)
        self.gat = GraphAttention(hd, cfg.heads, cfg.head_dim)
        self.refine_proj = nn.Linear(2 * hd, hd)
        if cfg.init_mode == "learned":
            self.init_proj = nn.Linear(1, hd)
        elif cfg.init_mode == "absolute":
            self.init_proj = nn.Linear(cfg.input_dim, hd)
        self.to(DTYPE)

    # -- single-step pieces -------------------------------------------------

    def _gaussian(self, feats, mean_layer, logvar_layer) -> GaussianParams:
        c = self.cfg.logvar_clip
        return GaussianParams(mean_layer(feats), torch.clamp(logvar_layer(feats), -c, c))

    def prior_step(self, h_prev, b_prev) -> GaussianParams:
        _check_finite(h_prev, b_prev)
        feats = self.prior(torch.cat([h_prev, self.phi_b(b_prev)], -1))
        return self._gaussian(feats, self.prior_mean, self.prior_logvar)

    def encoder_step(self, x_t, h_prev, b_prev) -> GaussianParams:
        _check_finite(x_t, h_prev, b_prev)
        feats = self.enc(torch.cat([self.phi_x(x_t), h_prev, self.phi_b(b_prev)], -1))
        return self._gaussian(feats, self.enc_mean, self.enc_logvar)

    def decoder_step(self, z_t, h_prev, b_prev) -> GaussianParams:
        feats = self.dec(torch.cat([self.phi_z(z_t), h_prev, self.phi_b(b_prev)], -1))
        c, lc = self.cfg.decoder_mean_clip, self.cfg.logvar_clip
        return GaussianParams(
            F.hardtanh(self.dec_mean(feats), -c, c), torch.clamp(self.dec_logvar(feats), -lc, lc)
        )

    def recurrence_step(self, x_t, z_t, h_prev) -> torch.Tensor:
        return self.rnn(torch.cat([self.phi_x(x_t), self.phi_z(z_t)], -1), h_prev)

    def refine(self, h, mask: torch.Tensor) -> torch.Tensor:
        return refine_hidden(h, self.gat(h, mask), self.refine_proj)

    def init_hidden(self, first_positions: torch.Tensor) -> torch.Tensor:
        p = first_positions.shape[0]
        mode = self.cfg.init_mode
        if mode == "zero":
            return torch.zeros(p, self.cfg.hidden_dim, dtype=DTYPE)
        if mode == "learned":
            return self.init_proj(torch.ones(p, 1, dtype=DTYPE))
        return self.init_proj(first_positions)

    def candidate_map(self, h, b_prev, pos_prev, centres, n: int, gen) -> torch.Tensor:
        """Belief histogram of ``n`` reparameterised draws from the prior + decoder."""
        p = h.shape[0]
        prior = self.prior_step(h, b_prev)
        z = reparameterize(
            GaussianParams(prior.mean[:, None], prior.log_var[:, None]),
            _noise((p, n, self.cfg.latent_dim), gen),
        )
        rep = lambda t: t[:, None].expand(p, n, t.shape[-1]).reshape(p * n, -1)
        dec = self.decoder_step(z.reshape(p * n, -1), rep(h), rep(b_prev))
        disp = reparameterize(dec, _noise(dec.mean.shape, gen)).reshape(p, n, -1)
        return soft_candidate_map(pos_prev[:, None, :] + disp, centres)

    # -- observation / generation ------------------------------------------

    def observe_step(
        self,
        x_t,
        h_prev,
        b_prev,
        mask,
        gen=None,
        belief_ctx: tuple | None = None,
        use_mean: bool = False,
    ) -> tuple[StepTerms, torch.Tensor]:
        """One teacher-forced step: returns the step's loss terms and refined state.

        ``belief_ctx`` = (pos_prev, centres, n_samples) enables the candidate-map
        divergence term; without it that term is zero.
        """
        prior = self.prior_step(h_prev, b_prev)
        enc = self.encoder_step(x_t, h_prev, b_prev)
        z = enc.mean if use_mean else reparameterize(enc, _noise(enc.mean.shape, gen))
        dec = self.decoder_step(z, h_prev, b_prev)
        nll = gaussian_nll_rows(x_t, dec)
        kl = gaussian_kl_rows(enc, prior)
        if belief_ctx is not None:
            pos_prev, centres, n = belief_ctx
            cand = self.candidate_map(h_prev, b_prev, pos_prev, centres, n, gen)
            kl_b = histogram_kl_rows(b_prev, cand)
        else:
            kl_b = torch.zeros_like(nll)
        h = self.recurrence_step(x_t, z, h_prev)
        h = self.refine(h, mask)
        return StepTerms(nll, kl, kl_b), h

    def generate_step(
        self,
        h_prev,
        pos_prev,
        b_prev,
        adjacency: Callable[[torch.Tensor], torch.Tensor],
        gen=None,
        mode: str = "sample",
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict one displacement from the prior, advance and refine the state.

        ``adjacency`` maps the new absolute positions (P, 2) to a boolean mask.
        """
        if mode not in ("sample", "mean"):
            raise ValueError("mode must be 'sample' or 'mean'")
        prior = self.prior_step(h_prev, b_prev)
        z = prior.mean if mode == "mean" else reparameterize(prior, _noise(prior.mean.shape, gen))
        dec = self.decoder_step(z, h_prev, b_prev)
        x_hat = dec.mean if mode == "mean" else reparameterize(dec, _noise(dec.mean.shape, gen))
        h = self.recurrence_step(x_hat, z, h_prev)
        h = self.refine(h, adjacency(pos_prev + x_hat))
        return x_hat, h


# -- window preparation --------------------------------------------------------


@dataclass
class PreparedWindow:
    positions: torch.Tensor  # (P, T, 2)
    displacements: torch.Tensor  # (P, T, 2)
    beliefs: torch.Tensor  # (P, T, L*L) map at each position
    centres: torch.Tensor  # (P, T, L*L, 2) neighbourhood centres at each position
    masks: torch.Tensor  # (T, P, P)

    @property
    def n_peds(self) -> int:
        return self.positions.shape[0]


def scene_mask(positions, cfg: ModelConfig) -> torch.Tensor:
    adj = build_adjacency(np.asarray(positions), cfg.adjacency, cfg.sigma, cfg.knn_k)
    return torch.as_tensor(adj.mask)


def block_mask(masks: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.block_diag(*[m.to(torch.int8) for m in masks]).bool()


def prepare_window(window: SceneWindow, grid: GlobalGrid | None, cfg: ModelConfig) -> PreparedWindow:
    pos = np.asarray(window.abs_positions, dtype=np.float64)
    p, t, _ = pos.shape
    flat = pos.reshape(-1, 2)
    if cfg.belief and grid is not None:
        beliefs = lookup_beliefs(grid, flat)
        centres = grid.geometry.neighbour_centres(flat)
    else:
        beliefs = np.full((p * t, cfg.belief_dim), 1.0 / cfg.belief_dim)
        centres = np.zeros((p * t, cfg.belief_dim, 2))
    masks = torch.stack([scene_mask(pos[:, s], cfg) for s in range(t)])
    return PreparedWindow(
        torch.as_tensor(pos),
        torch.as_tensor(np.asarray(window.displacements, dtype=np.float64)),
        torch.as_tensor(beliefs).reshape(p, t, -1),
        torch.as_tensor(centres).reshape(p, t, -1, 2),
        masks,
    )


def collate(windows: Sequence[PreparedWindow]) -> tuple[PreparedWindow, torch.Tensor]:
    """Stack windows along the pedestrian axis with block-diagonal masks.

    Also returns per-pedestrian weights that average over each window's
    pedestrians and then over windows.
    """
    t = windows[0].positions.shape[1]
    if any(w.positions.shape[1] != t for w in windows):
        raise ValueError("windows in a batch must share their length")
    masks = torch.stack([block_mask([w.masks[s] for w in windows]) for s in range(t)])
    weights = torch.cat(
        [torch.full((w.n_peds,), 1.0 / (w.n_peds * len(windows)), dtype=DTYPE) for w in windows]
    )
    batch = PreparedWindow(
        torch.cat([w.positions for w in windows]),
        torch.cat([w.displacements for w in windows]),
        torch.cat([w.beliefs for w in windows]),
        torch.cat([w.centres for w in windows]),
        masks,
    )
    return batch, weights


def window_terms(
    model: ACVRNN,
    batch: PreparedWindow,
    gen=None,
    map_samples: int = 100,
    steps: int | None = None,
) -> list[StepTerms]:
    """Teacher-forced pass over every transition of the batch (or the first ``steps``)."""
    t_total = batch.positions.shape[1]
    last = t_total if steps is None else min(t_total, steps + 1)
    h = model.init_hidden(batch.positions[:, 0])
    out = []
    use_belief = model.cfg.belief and map_samples > 0
    for t in range(1, last):
        ctx = (batch.positions[:, t - 1], batch.centres[:, t - 1], map_samples) if use_belief else None
        terms, h = model.observe_step(
            batch.displacements[:, t], h, batch.beliefs[:, t - 1], batch.masks[t], gen, ctx
        )
        out.append(terms)
    return out


# -- rollout ---------------------------------------------------------------------


def rollout(
    model: ACVRNN,
    window: SceneWindow,
    grid: GlobalGrid | None,
    k: int = 20,
    gen: torch.Generator | None = None,
    mode: str = "sample",
    steps: int | None = None,
) -> np.ndarray:
    """Sample ``k`` futures for every pedestrian; returns (k, P, steps, 2) positions.

    The observed prefix is re-encoded for every sample with fresh noise. The k
    samples run as k disconnected copies of the scene in one block graph.
    """
    cfg = model.cfg
    steps = window.t_pred if steps is None else steps
    prep = prepare_window(
        SceneWindow(window.ped_ids, window.observed, window.displacements[:, : window.t_obs], window.t_obs, 0),
        grid,
        cfg,
    )
    p = prep.n_peds
    rep = lambda x: x.repeat((k,) + (1,) * (x.dim() - 1))

    def adjacency(positions: torch.Tensor) -> torch.Tensor:
        pos = positions.detach().numpy().reshape(k, p, 2)
        return block_mask([scene_mask(pos[i], cfg) for i in range(k)])

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            h = model.init_hidden(rep(prep.positions[:, 0]))
            for t in range(1, window.t_obs):
                mask = block_mask([prep.masks[t]] * k)
                _, h = model.observe_step(
                    rep(prep.displacements[:, t]), h, rep(prep.beliefs[:, t - 1]), mask, gen,
                    use_mean=(mode == "mean"),
                )
            pos = rep(prep.positions[:, window.t_obs - 1])
            out = []
            for _ in range(steps):
                b = _beliefs_at(grid, pos, cfg)
                x_hat, h = model.generate_step(h, pos, b, adjacency, gen, mode)
                if not torch.isfinite(x_hat).all():
                    raise NumericError("non-finite prediction")
                pos = pos + x_hat
                out.append(pos)
    finally:
        model.train(was_training)
    return torch.stack(out, dim=1).numpy().reshape(k, p, steps, 2)


def _beliefs_at(grid: GlobalGrid | None, pos: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    if cfg.belief and grid is not None:
        return torch.as_tensor(lookup_beliefs(grid, pos.numpy()))
    return torch.full((pos.shape[0], cfg.belief_dim), 1.0 / cfg.belief_dim, dtype=DTYPE)


def generated_belief_divergence(
    model: ACVRNN,
    window: SceneWindow,
    grid: GlobalGrid,
    n: int = 100,
    gen: torch.Generator | None = None,
) -> float:
    """Mean histogram KL between the grid's maps and the model's candidate maps
    along a mean-mode rollout of the prediction horizon."""
    cfg = model.cfg
    path = rollout(model, window, grid, k=1, gen=gen, mode="mean")[0]
    prev = np.concatenate([window.observed[:, -1:], path[:, :-1]], axis=1)
    obs = SceneWindow(window.ped_ids, window.observed, window.displacements[:, : window.t_obs], window.t_obs, 0)
    prep = prepare_window(obs, grid, cfg)
    p = prep.n_peds
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with torch.no_grad():
            h = model.init_hidden(prep.positions[:, 0])
            for t in range(1, window.t_obs):
                _, h = model.observe_step(
                    prep.displacements[:, t], h, prep.beliefs[:, t - 1], prep.masks[t], use_mean=True
                )
            adjacency = lambda positions: scene_mask(positions.numpy(), cfg)
            for s in range(window.t_pred):
                pos = torch.as_tensor(prev[:, s])
                b_true = torch.as_tensor(lookup_beliefs(grid, prev[:, s]))
                centres = torch.as_tensor(grid.geometry.neighbour_centres(prev[:, s]))
                b_in = b_true if cfg.belief else _beliefs_at(None, pos, cfg)
                cand = model.candidate_map(h, b_in, pos, centres, n, gen)
                total += float(histogram_kl_rows(b_true, cand).sum())
                count += p
                _, h = model.generate_step(h, pos, b_in, adjacency, gen, mode="mean")
    finally:
        model.train(was_training)
    return total / count
