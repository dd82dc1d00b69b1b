"""Shared/specific decoupling: linear projections into a common latent
space and the two contrastive losses trained on top of them.

The tabular embedding t is split into a shared part z_t_sh (information the
time series also carries) and a specific part z_t_sp (tabular-only); the
time-series embedding s projects to a single vector z_s. The alignment
loss pulls z_s toward z_t_sh while pushing it away from the batch's z_t_sp
vectors, with the positive pair excluded from the denominator, so the loss
can go negative. The regularization loss is a label-supervised contrastive
pull between z_t_sp and z_s across samples sharing a class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, ShapeError
from .layers import Linear, ParameterStore
from .tensor import Tensor

__all__ = [
    "DecouplingConfig",
    "EmbeddingTriple",
    "DecouplingProjector",
    "pairwise_cosine",
    "shsd_loss",
    "regularization_loss",
    "decoupling_loss",
]


@dataclass(frozen=True)
class DecouplingConfig:
    tau: float = 0.1
    w_shsd: float = 1.0
    w_reg: float = 1.0
    d_z: int = 32

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.w_shsd < 0 or self.w_reg < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.d_z < 1:
            raise ConfigError("d_z must be >= 1")


@dataclass
class EmbeddingTriple:
    """Batched decoupled embeddings, one row per sample."""

    z_s: Tensor
    z_t_sh: Tensor
    z_t_sp: Tensor

    def __post_init__(self):
        shapes = {t.data.shape for t in (self.z_s, self.z_t_sh, self.z_t_sp)}
        if len(shapes) != 1 or self.z_s.data.ndim != 2:
            raise ShapeError(
                f"triple parts must share one (batch, d_z) shape, got "
                f"{[t.data.shape for t in (self.z_s, self.z_t_sh, self.z_t_sp)]}"
            )

    @property
    def n(self) -> int:
        return self.z_s.data.shape[0]


class DecouplingProjector:
    """Linear decoupling heads.

    The tabular stream uses one weight matrix producing 2*d_z channels,
    split into the shared half then the specific half; the time-series
    stream uses a single d_z head. Projections are linear, so projecting
    token-wise and mean-pooling afterwards equals pooling first and
    projecting the result; both entry points are provided.
    """

    def __init__(self, store: ParameterStore, name: str, d_t: int, d_s: int,
                 d_z: int, rng: np.random.Generator):
        self.d_z = d_z
        self.tab = Linear(store, f"{name}.tab", d_t, 2 * d_z, rng)
        self.ts = Linear(store, f"{name}.ts", d_s, d_z, rng)

    def project_tokens(self, t_tokens: Tensor, s_tokens: Tensor):
        """Token-wise projection: returns (z_t_sh, z_t_sp, z_s) token streams."""
        both = self.tab(t_tokens)
        z_t_sh = both[:, :, : self.d_z]
        z_t_sp = both[:, :, self.d_z:]
        z_s = self.ts(s_tokens)
        return z_t_sh, z_t_sp, z_s

    def project(self, t: Tensor, s: Tensor) -> EmbeddingTriple:
        """Per-sample projection of pooled embeddings (batch, width)."""
        both = self.tab(t)
        return EmbeddingTriple(
            z_s=self.ts(s),
            z_t_sh=both[:, : self.d_z],
            z_t_sp=both[:, self.d_z:],
        )


def _row_normalize(x: Tensor, what: str) -> Tensor:
    sq = (x * x).sum(axis=1, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise DegenerateInputError(f"zero-norm {what} embedding; cannot normalize for cosine similarity")
    return x / (sq ** 0.5)


def pairwise_cosine(a: Tensor, b: Tensor, name_a: str = "a", name_b: str = "b") -> Tensor:
    """(i, j) -> cosine similarity of a_i and b_j, differentiable in both."""
    an = _row_normalize(a, name_a)
    bn = _row_normalize(b, name_b)
    return T.matmul(an, bn.transpose())


def shsd_loss(triple: EmbeddingTriple, cfg: DecouplingConfig) -> Tensor:
    """Cross-modal shared-alignment loss, averaged over both anchor roles.

    Anchor z_s_i (and symmetrically z_t_sh_i): numerator similarity with
    its own shared partner, denominator summed over the batch's specific
    tabular embeddings only.
    """
    inv_tau = 1.0 / cfg.tau
    zs = _row_normalize(triple.z_s, "z_s")
    zsh = _row_normalize(triple.z_t_sh, "z_t_sh")
    zsp = _row_normalize(triple.z_t_sp, "z_t_sp")

    pos = (zs * zsh).sum(axis=1) * inv_tau
    den_st = T.exp(T.matmul(zs, zsp.transpose()) * inv_tau).sum(axis=1)
    den_ts = T.exp(T.matmul(zsh, zsp.transpose()) * inv_tau).sum(axis=1)
    # the two anchor roles share the positive term sim(z_s, z_t_sh)
    return (T.log(den_st) + T.log(den_ts) - 2.0 * pos).mean() * 0.5


def regularization_loss(triple: EmbeddingTriple, labels: np.ndarray,
                        cfg: DecouplingConfig) -> Tensor:
    """Label-supervised contrastive pull between z_t_sp and z_s.

    For anchor i, every same-class sample j is a positive; the softmax
    denominator runs over the whole batch. Averaged over both anchor
    directions and the batch.
    """
    y = np.asarray(labels)
    n = triple.n
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match batch size {n}")
    same = (y[:, None] == y[None, :]).astype(np.float64)
    s_count = same.sum(axis=1)  # >= 1: each sample matches itself

    zsp = _row_normalize(triple.z_t_sp, "z_t_sp")
    zs = _row_normalize(triple.z_s, "z_s")
    sims = T.matmul(zsp, zs.transpose()) * (1.0 / cfg.tau)

    def direction(sim_matrix: Tensor) -> Tensor:
        den = T.log(T.exp(sim_matrix).sum(axis=1))
        pulled = (sim_matrix * same).sum(axis=1) / s_count
        return den - pulled

    r_ts = direction(sims)
    r_st = direction(sims.transpose())
    return (r_ts + r_st).mean() * 0.5


def decoupling_loss(triple: EmbeddingTriple, labels: np.ndarray,
                    cfg: DecouplingConfig) -> Tensor:
    """Weighted sum of the alignment and regularization losses."""
    parts = []
    if cfg.w_shsd != 0.0:
        parts.append(cfg.w_shsd * shsd_loss(triple, cfg))
    if cfg.w_reg != 0.0:
        parts.append(cfg.w_reg * regularization_loss(triple, labels, cfg))
    if not parts:
        return Tensor(0.0)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
