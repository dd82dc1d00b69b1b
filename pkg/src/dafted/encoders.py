"""Modality tokenizers and the self-attention encoders.

Each tabular feature becomes one token (per-feature affine for numeric
columns, an embedding row for categorical ones); each time series becomes
one token via a per-series linear projection over the time axis. Both
token streams then pass through stacks of pre-norm transformer blocks.
No positional encodings are added: feature identity lives entirely in the
per-feature tokenizer weights, so the encoder is permutation-equivariant
over tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, SchemaError, ShapeError
from .layers import ParameterStore, TransformerBlock
from .tensor import Tensor

__all__ = ["TabularSchema", "EncoderConfig", "TabularTokenizer", "TimeSeriesTokenizer", "Encoder"]


@dataclass(frozen=True)
class TabularSchema:
    """Ordered feature layout: numeric column names, then categorical
    (name, cardinality) pairs."""

    numeric_features: Tuple[str, ...]
    categorical_features: Tuple[Tuple[str, int], ...] = ()

    def __post_init__(self):
        names = list(self.numeric_features) + [n for n, _ in self.categorical_features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names in schema")
        for name, card in self.categorical_features:
            if card < 2:
                raise SchemaError(f"categorical feature {name!r} needs cardinality >= 2, got {card}")

    @property
    def n_tokens(self) -> int:
        return len(self.numeric_features) + len(self.categorical_features)

    @property
    def feature_names(self) -> Tuple[str, ...]:
        return tuple(self.numeric_features) + tuple(n for n, _ in self.categorical_features)


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    ffn_multiplier: int = 4
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


class TabularTokenizer:
    """One token per feature: numeric j -> x_j * W_j + b_j, categorical ->
    embedding row for the category index."""

    def __init__(self, store: ParameterStore, name: str, schema: TabularSchema,
                 d: int, rng: np.random.Generator):
        self.schema = schema
        self.d = d
        n_num = len(schema.numeric_features)
        scale = 1.0 / math.sqrt(d)
        if n_num:
            self.w_num = store.add(f"{name}.num.w", rng.normal(0.0, scale, (n_num, d)))
            self.b_num = store.add(f"{name}.num.b", rng.normal(0.0, scale, (n_num, d)))
        else:
            self.w_num = self.b_num = None
        self.cat_tables = []
        for feat, card in schema.categorical_features:
            self.cat_tables.append(store.add(f"{name}.cat.{feat}", rng.normal(0.0, scale, (card, d))))

    def __call__(self, x_num: np.ndarray, x_cat: np.ndarray) -> Tensor:
        n_num = len(self.schema.numeric_features)
        n_cat = len(self.schema.categorical_features)
        if x_num.shape[1] != n_num or x_cat.shape[1] != n_cat:
            raise SchemaError(
                f"expected {n_num} numeric and {n_cat} categorical columns, "
                f"got {x_num.shape[1]} and {x_cat.shape[1]}"
            )
        parts = []
        if n_num:
            parts.append(self.w_num * x_num[:, :, None] + self.b_num)
        for j, table in enumerate(self.cat_tables):
            idx = x_cat[:, j]
            card = table.data.shape[0]
            if idx.min(initial=0) < 0 or (len(idx) and idx.max() >= card):
                raise ValueError(
                    f"category index out of range for feature "
                    f"{self.schema.categorical_features[j][0]!r} (cardinality {card})"
                )
            parts.append(table[idx.astype(np.intp)].reshape(len(idx), 1, self.d))
        if len(parts) == 1:
            return parts[0]
        return T.concatenate(parts, axis=1)


class TimeSeriesTokenizer:
    """One token per series: a per-series linear projection of the length-T
    trace down to width d."""

    def __init__(self, store: ParameterStore, name: str, n_series: int, t_len: int,
                 d: int, rng: np.random.Generator):
        self.n_series = n_series
        self.t_len = t_len
        self.d = d
        self.w = store.add(f"{name}.w", rng.normal(0.0, 1.0 / math.sqrt(t_len), (n_series, t_len, d)))
        self.b = store.add(f"{name}.b", np.zeros((n_series, d)))

    def __call__(self, series: np.ndarray) -> Tensor:
        if series.ndim != 3 or series.shape[1:] != (self.n_series, self.t_len):
            raise ShapeError(
                f"expected series of shape (batch, {self.n_series}, {self.t_len}), got {series.shape}"
            )
        return T.series_projection(Tensor(series), self.w, self.b)


class Encoder:
    """Stack of pre-norm transformer blocks over a token sequence."""

    def __init__(self, store: ParameterStore, name: str, cfg: EncoderConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [
            TransformerBlock(store, f"{name}.block{i}", cfg.embed_dim, cfg.n_heads,
                             cfg.ffn_multiplier, cfg.dropout_rate, rng)
            for i in range(cfg.n_blocks)
        ]

    def __call__(self, tokens: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if tokens.data.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(
                f"token width {tokens.data.shape[-1]} != encoder width {self.cfg.embed_dim}"
            )
        for block in self.blocks:
            tokens = block(tokens, rng)
        return tokens
