"""Parameter storage and the small layer vocabulary shared by all models.

Parameters live in one contiguous float64 buffer after ``freeze()`` so the
optimizer can update every weight with a handful of vectorized array ops;
each parameter Tensor's ``data`` and ``grad.data`` are views into that
buffer.
"""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

__all__ = [
    "ParameterStore",
    "Linear",
    "LayerNorm",
    "MultiHeadAttention",
    "FeedForward",
    "TransformerBlock",
    "dropout",
]


class ParameterStore:
    """Named trainable parameters backed by one flat buffer.

    Usage: layers call ``add`` during construction; the owning model calls
    ``freeze`` once, after which ``flat``/``flat_grad`` expose the whole
    parameter vector for the optimizer and ``zero_grad`` is a single fill.
    """

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}
        self.flat: Optional[np.ndarray] = None
        self.flat_grad: Optional[np.ndarray] = None

    def add(self, name: str, init: np.ndarray) -> Tensor:
        if self.flat is not None:
            raise ContractError("ParameterStore is frozen; cannot add parameters")
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(init, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def freeze(self) -> None:
        if self.flat is not None:
            return
        total = sum(t.data.size for t in self._tensors.values())
        self.flat = np.zeros(total)
        self.flat_grad = np.zeros(total)
        off = 0
        for t in self._tensors.values():
            n = t.data.size
            view = self.flat[off:off + n].reshape(t.data.shape)
            view[...] = t.data
            t.data = view
            g = Tensor(self.flat_grad[off:off + n].reshape(t.data.shape))
            t.grad = g
            off += n

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def count(self, prefix: str) -> int:
        """Total scalar parameters whose name starts with ``prefix``."""
        return sum(t.data.size for n, t in self._tensors.items() if n.startswith(prefix))

    def names(self) -> Iterator[str]:
        return iter(self._tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def zero_grad(self) -> None:
        if self.flat_grad is not None:
            self.flat_grad[...] = 0.0
        else:
            for t in self._tensors.values():
                t.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(state)
        extra = set(state) - set(self._tensors)
        if missing or extra:
            raise ContractError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, t in self._tensors.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {n!r}: shape {arr.shape} != {t.data.shape}")
            t.data[...] = arr


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or rng is None (eval mode)."""
    if rate <= 0.0 or rng is None:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * mask


def branch_mask(shape, rate: float, rng: Optional[np.random.Generator]):
    """Pre-scaled inverted-dropout mask for the fused sublayer ops; None in
    eval mode. Same draw semantics as ``dropout``."""
    if rate <= 0.0 or rng is None:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.w = store.add(f"{name}.w", rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out)))
        self.b = store.add(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int):
        self.gain = store.add(f"{name}.gain", np.ones(d))
        self.bias = store.add(f"{name}.bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention:
    """Standard MSA: per-head scaled dot-product over learned Q/K/V, then an
    output projection. Acts as cross-attention when ``context`` differs from
    the query stream."""

    def __init__(self, store: ParameterStore, name: str, d: int, n_heads: int,
                 rng: np.random.Generator):
        if d % n_heads != 0:
            raise ShapeError(f"embed dim {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(store, f"{name}.q", d, d, rng)
        self.k = Linear(store, f"{name}.k", d, d, rng)
        self.v = Linear(store, f"{name}.v", d, d, rng)
        self.o = Linear(store, f"{name}.o", d, d, rng)

    def __call__(self, x: Tensor, context: Optional[Tensor] = None,
                 return_weights: bool = False):
        ctx = x if context is None else context
        q = self.q(x)
        k = self.k(ctx)
        v = self.v(ctx)
        if return_weights:
            att, w = T.attention_core(q, k, v, self.n_heads, return_weights=True)
            return self.o(att), w
        return self.o(T.attention_core(q, k, v, self.n_heads))


class FeedForward:
    """Position-wise two-layer GELU network."""

    def __init__(self, store: ParameterStore, name: str, d: int, multiplier: int,
                 rng: np.random.Generator):
        self.up = Linear(store, f"{name}.up", d, multiplier * d, rng)
        self.down = Linear(store, f"{name}.down", multiplier * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class TransformerBlock:
    """Pre-norm residual block: x + MSA(LN(x)), then + FFN(LN(·)).

    Dropout applies to each residual branch output during training.
    """

    def __init__(self, store: ParameterStore, name: str, d: int, n_heads: int,
                 ffn_multiplier: int, dropout_rate: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(store, f"{name}.norm1", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, n_heads, rng)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d, ffn_multiplier, rng)
        self.rate = dropout_rate

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        a = self.attn
        x = T.attention_sublayer(
            x, self.norm1.gain, self.norm1.bias,
            a.q.w, a.q.b, a.k.w, a.k.b, a.v.w, a.v.b, a.o.w, a.o.b, a.n_heads,
            residual=True, drop_mask=branch_mask(x.data.shape, self.rate, rng))
        f = self.ffn
        return T.ffn_sublayer(x, self.norm2.gain, self.norm2.bias,
                              f.up.w, f.up.b, f.down.w, f.down.b,
                              residual=True,
                              drop_mask=branch_mask(x.data.shape, self.rate, rng))
