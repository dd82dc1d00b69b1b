"""Asymmetric interleaved attention fusion.

The specific tabular tokens, with a learned CLS token prepended, form the
persistent query stream. Each round alternates self-attention on that
stream with cross-attention injections of the shared-tabular context and
the time-series context. Every cross-attention application in every round
runs through one shared parameter set (a per-context-type pair of sets is
available behind a flag). Sublayers are attention-only pre-norm residual
blocks; the prediction head is a single linear readout of the final CLS
state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import LayerNorm, Linear, MultiHeadAttention, ParameterStore
from .tensor import Tensor

__all__ = [
    "FusionConfig",
    "SelfAttentionBlock",
    "CrossAttentionBlock",
    "FusionStack",
    "predict_proba",
]

_STEPS = ("sa", "ca_shared", "ca_ts", "ca_both")


@dataclass(frozen=True)
class FusionConfig:
    n_rounds: int = 2
    embed_dim: int = 32
    n_heads: int = 4
    n_classes: int = 3
    per_context_weights: bool = False
    concat_context: bool = False
    round_order: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ConfigError("n_rounds must be >= 1")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        for step in self.resolved_order():
            if step not in _STEPS:
                raise ConfigError(f"unknown fusion step {step!r}; valid steps: {_STEPS}")

    def resolved_order(self) -> Tuple[str, ...]:
        if self.round_order is not None:
            return tuple(self.round_order)
        if self.concat_context:
            return ("sa", "ca_both")
        return ("sa", "ca_shared", "sa", "ca_ts")


class SelfAttentionBlock:
    """Pre-norm residual self-attention, no feed-forward sublayer."""

    def __init__(self, store: ParameterStore, name: str, d: int, n_heads: int,
                 rng: np.random.Generator):
        self.norm = LayerNorm(store, f"{name}.norm", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, n_heads, rng)

    def __call__(self, x: Tensor) -> Tensor:
        a = self.attn
        return T.attention_sublayer(
            x, self.norm.gain, self.norm.bias,
            a.q.w, a.q.b, a.k.w, a.k.b, a.v.w, a.v.b, a.o.w, a.o.b, a.n_heads,
            residual=True)


class CrossAttentionBlock:
    """Pre-norm residual cross-attention: queries from the stream, keys and
    values from a context sequence, each normalized by its own layer norm."""

    def __init__(self, store: ParameterStore, name: str, d: int, n_heads: int,
                 rng: np.random.Generator):
        self.norm_q = LayerNorm(store, f"{name}.norm_q", d)
        self.norm_ctx = LayerNorm(store, f"{name}.norm_ctx", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, n_heads, rng)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        if context.data.shape[-1] != x.data.shape[-1]:
            raise ShapeError(
                f"context width {context.data.shape[-1]} != stream width {x.data.shape[-1]}"
            )
        a = self.attn
        return T.attention_sublayer(
            x, self.norm_q.gain, self.norm_q.bias,
            a.q.w, a.q.b, a.k.w, a.k.b, a.v.w, a.v.b, a.o.w, a.o.b, a.n_heads,
            context=context, ctx_ln_g=self.norm_ctx.gain, ctx_ln_b=self.norm_ctx.bias,
            residual=True)


class FusionStack:
    """CLS + specific-tabular query stream, contexts injected by shared-weight
    cross-attention."""

    def __init__(self, store: ParameterStore, name: str, cfg: FusionConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.cls = store.add(f"{name}.cls", rng.normal(0.0, 0.02, (d,)))
        order = cfg.resolved_order()
        n_sa = sum(1 for s in order if s == "sa") * cfg.n_rounds
        self.sa_blocks = [
            SelfAttentionBlock(store, f"{name}.sa{i}", d, cfg.n_heads, rng)
            for i in range(n_sa)
        ]
        # one parameter set serves every cross-attention application; the
        # per_context_weights flag upgrades to one set per context type
        self.ca_shared = CrossAttentionBlock(store, f"{name}.ca", d, cfg.n_heads, rng)
        if cfg.per_context_weights:
            self.ca_ts = CrossAttentionBlock(store, f"{name}.ca_ts", d, cfg.n_heads, rng)
        else:
            self.ca_ts = self.ca_shared
        self.head = Linear(store, f"{name}.head", d, cfg.n_classes, rng)

    def __call__(self, specific_tokens: Tensor, shared_context: Tensor,
                 ts_context: Tensor) -> Tensor:
        d = self.cfg.embed_dim
        for seq, what in ((specific_tokens, "specific"), (shared_context, "shared"),
                          (ts_context, "time-series")):
            if seq.data.ndim != 3 or seq.data.shape[-1] != d:
                raise ShapeError(f"{what} tokens must be (batch, tokens, {d}), got {seq.data.shape}")
        n = specific_tokens.data.shape[0]
        cls_tok = self.cls.reshape(1, 1, d) + np.zeros((n, 1, d))
        stream = T.concatenate([cls_tok, specific_tokens], axis=1)

        both = None
        order = self.cfg.resolved_order()
        if "ca_both" in order:
            both = T.concatenate([shared_context, ts_context], axis=1)
        sa_i = 0
        for _ in range(self.cfg.n_rounds):
            for step in order:
                if step == "sa":
                    stream = self.sa_blocks[sa_i](stream)
                    sa_i += 1
                elif step == "ca_shared":
                    stream = self.ca_shared(stream, shared_context)
                elif step == "ca_ts":
                    stream = self.ca_ts(stream, ts_context)
                else:
                    stream = self.ca_shared(stream, both)
        return self.head(stream[:, 0])


def predict_proba(logits: Tensor) -> Tensor:
    """Class probabilities from logits (softmax over the last axis)."""
    return T.softmax(logits, axis=-1)
