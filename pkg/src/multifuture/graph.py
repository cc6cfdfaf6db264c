"""Pedestrian interaction graphs and attentive hidden-state refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import ConfigError

ADJACENCY_MODES = ("similarity", "knn", "ones")
MASK_THRESHOLD = 1e-6


@dataclass
class AdjacencyMatrix:
    weights: np.ndarray
    mode: str

    @property
    def mask(self) -> np.ndarray:
        return self.weights > MASK_THRESHOLD


def build_adjacency(positions, mode: str = "similarity", sigma: float = 1.0, k: int = 3) -> AdjacencyMatrix:
    """Pairwise interaction weights for one scene at one time step.

    ``similarity`` uses the heat kernel exp(-d / (2 sigma^2)) of the Euclidean
    distance d; ``knn`` links each pedestrian to itself and its ``k`` nearest
    others (ties go to the lower index); ``ones`` links everybody.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    p = len(pos)
    if p < 1:
        raise ConfigError("need at least one pedestrian")
    if mode not in ADJACENCY_MODES:
        raise ConfigError(f"unknown adjacency mode {mode!r}")
    if mode == "ones":
        return AdjacencyMatrix(np.ones((p, p)), mode)
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1))
    if mode == "similarity":
        if not sigma > 0:
            raise ConfigError("sigma must be positive")
        w = np.exp(-dist / (2.0 * sigma**2))
        np.fill_diagonal(w, 1.0)
        return AdjacencyMatrix(w, mode)
    if k < 1:
        raise ConfigError("k must be >= 1")
    w = np.eye(p)
    for i in range(p):
        others = [j for j in np.argsort(dist[i], kind="stable") if j != i]
        w[i, others[:k]] = 1.0
    return AdjacencyMatrix(w, mode)


def block_diagonal(blocks: list[AdjacencyMatrix]) -> AdjacencyMatrix:
    if not blocks:
        raise ValueError("need at least one block")
    size = sum(b.weights.shape[0] for b in blocks)
    out = np.zeros((size, size))
    at = 0
    for b in blocks:
        n = b.weights.shape[0]
        out[at : at + n, at : at + n] = b.weights
        at += n
    modes = {b.mode for b in blocks}
    return AdjacencyMatrix(out, modes.pop() if len(modes) == 1 else "mixed")


class FeatureNorm(nn.Module):
    """Per-feature batch normalisation that tolerates a single node.

    Training with more than one node uses batch statistics and updates the
    running averages; otherwise the running statistics are used.
    """

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(features))
        self.bias = nn.Parameter(torch.zeros(features))
        self.register_buffer("running_mean", torch.zeros(features))
        self.register_buffer("running_var", torch.ones(features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] > 1:
            mean = x.mean(dim=0)
            var = x.var(dim=0, unbiased=False)
            with torch.no_grad():
                n = x.shape[0]
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var * n / (n - 1))
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class GraphAttention(nn.Module):
    """Multi-head graph attention over hidden states, then Linear, norm and tanh.

    Adjacency acts only as a neighbourhood mask; logits come from the learned
    projections alone.
    """

    def __init__(self, features: int = 64, heads: int = 4, head_dim: int = 8, slope: float = 0.2):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.slope = slope
        self.W = nn.Parameter(torch.empty(heads, head_dim, features))
        self.a = nn.Parameter(torch.empty(heads, 2 * head_dim))
        self.out = nn.Linear(heads * head_dim, features)
        self.norm = FeatureNorm(features)
        nn.init.xavier_uniform_(self.W, gain=1.414)
        nn.init.xavier_uniform_(self.a, gain=1.414)

    def attention(self, h: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Attention coefficients (H, P, P) and projected features (H, P, F')."""
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every node needs a non-empty neighbourhood")
        wh = torch.einsum("hof,pf->hpo", self.W, h)
        src = wh @ self.a[:, : self.head_dim, None]  # (H, P, 1)
        dst = wh @ self.a[:, self.head_dim :, None]
        logits = F.leaky_relu(src + dst.transpose(1, 2), self.slope)
        logits = logits.masked_fill(~mask, float("-inf"))
        return torch.softmax(logits, dim=-1), wh

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        alpha, wh = self.attention(h, mask)
        heads = F.elu(alpha @ wh)  # (H, P, F')
        cat = heads.transpose(0, 1).reshape(h.shape[0], -1)
        return torch.tanh(self.norm(self.out(cat)))


def refine_hidden(h: torch.Tensor, h_hat: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    return projection(torch.cat([h, h_hat], dim=-1))


def as_mask(adj: AdjacencyMatrix | np.ndarray, device=None) -> torch.Tensor:
    weights = adj.weights if isinstance(adj, AdjacencyMatrix) else np.asarray(adj)
    return torch.as_tensor(weights > MASK_THRESHOLD, device=device)
