"""Model assemblies: the full decoupled asymmetric fusion model, its
ablations, and the baseline architectures used for comparisons.

Every variant shares the same calling convention: ``forward(x_num, x_cat,
series, rng)`` returns ``(logits, triple)`` where ``triple`` is the pooled
decoupled embedding triple for variants that have one and None otherwise.
Variants without a shared/specific split but with projections export a
triple whose shared and specific parts are the same vector, so geometric
gap diagnostics read exactly zero for them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .decoupling import DecouplingConfig, DecouplingProjector, EmbeddingTriple
from .encoders import Encoder, EncoderConfig, TabularSchema, TabularTokenizer, TimeSeriesTokenizer
from .errors import ConfigError
from .fusion import CrossAttentionBlock, FusionConfig, FusionStack, SelfAttentionBlock
from .layers import Linear, ParameterStore
from .tensor import Tensor

__all__ = ["ModelConfig", "VARIANTS", "build_variant"]

VARIANTS = (
    "dafted",
    "no_decoupling",
    "no_asym_fusion",
    "neither",
    "mlp_concat",
    "ft_concat",
    "symmetric_cross",
    "tab_only",
    "ts_only",
)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoupling: DecouplingConfig = field(default_factory=DecouplingConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.fusion.embed_dim != self.encoder.embed_dim:
            raise ConfigError(
                f"fusion width {self.fusion.embed_dim} != encoder width {self.encoder.embed_dim}"
            )
        if self.decoupling.d_z != self.encoder.embed_dim:
            raise ConfigError(
                "d_z must equal embed_dim so decoupled tokens can enter attention fusion"
            )


def paper_scale() -> "ModelConfig":
    """The full-size configuration (8-head, 3-block, width 192)."""
    return ModelConfig(
        encoder=EncoderConfig(embed_dim=192, n_heads=8, n_blocks=3),
        decoupling=DecouplingConfig(d_z=192),
        fusion=FusionConfig(embed_dim=192, n_heads=8),
    )


class _Base:
    variant: str = ""
    has_triple: bool = False
    trains_decoupling: bool = False

    def __init__(self, cfg: ModelConfig, schema: TabularSchema, n_series: int,
                 t_len: int, seed: int):
        self.cfg = cfg
        self.schema = schema
        self.n_series = n_series
        self.t_len = t_len
        self.store = ParameterStore()
        self.rng_init = np.random.default_rng(np.random.SeedSequence([seed, 101]))

    def finalize(self):
        self.store.freeze()
        return self

    def __call__(self, x_num, x_cat, series, rng=None):
        return self.forward(x_num, x_cat, series, rng)

    @property
    def n_params(self) -> int:
        return self.store.n_params


class DaftedModel(_Base):
    """Tokenize, encode, decouple token-wise, fuse asymmetrically."""

    variant = "dafted"
    has_triple = True
    trains_decoupling = True

    def __init__(self, cfg, schema, n_series, t_len, seed):
        super().__init__(cfg, schema, n_series, t_len, seed)
        d = cfg.encoder.embed_dim
        rng = self.rng_init
        self.tab_tok = TabularTokenizer(self.store, "tab_tok", schema, d, rng)
        self.ts_tok = TimeSeriesTokenizer(self.store, "ts_tok", n_series, t_len, d, rng)
        self.tab_enc = Encoder(self.store, "tab_enc", cfg.encoder, rng)
        self.ts_enc = Encoder(self.store, "ts_enc", cfg.encoder, rng)
        self.projector = DecouplingProjector(self.store, "dec", d, d, cfg.decoupling.d_z, rng)
        self.fusion = FusionStack(self.store, "fuse", cfg.fusion, rng)

    def forward(self, x_num, x_cat, series, rng=None):
        t_enc = self.tab_enc(self.tab_tok(x_num, x_cat), rng)
        s_enc = self.ts_enc(self.ts_tok(series), rng)
        sh_tok, sp_tok, zs_tok = self.projector.project_tokens(t_enc, s_enc)
        logits = self.fusion(sp_tok, sh_tok, zs_tok)
        triple = EmbeddingTriple(
            z_s=zs_tok.mean(axis=1),
            z_t_sh=sh_tok.mean(axis=1),
            z_t_sp=sp_tok.mean(axis=1),
        )
        return logits, triple


class NoDecouplingModel(_Base):
    """Asymmetric fusion retained, shared/specific split removed: one
    tabular projection plays both the primary-stream and shared-context
    roles, so the exported triple has identical shared and specific parts."""

    variant = "no_decoupling"
    has_triple = True

    def __init__(self, cfg, schema, n_series, t_len, seed):
        super().__init__(cfg, schema, n_series, t_len, seed)
        d = cfg.encoder.embed_dim
        rng = self.rng_init
        self.tab_tok = TabularTokenizer(self.store, "tab_tok", schema, d, rng)
        self.ts_tok = TimeSeriesTokenizer(self.store, "ts_tok", n_series, t_len, d, rng)
        self.tab_enc = Encoder(self.store, "tab_enc", cfg.encoder, rng)
        self.ts_enc = Encoder(self.store, "ts_enc", cfg.encoder, rng)
        self.tab_proj = Linear(self.store, "proj.tab", d, cfg.decoupling.d_z, rng)
        self.ts_proj = Linear(self.store, "proj.ts", d, cfg.decoupling.d_z, rng)
        self.fusion = FusionStack(self.store, "fuse", cfg.fusion, rng)

    def forward(self, x_num, x_cat, series, rng=None):
        t_enc = self.tab_enc(self.tab_tok(x_num, x_cat), rng)
        s_enc = self.ts_enc(self.ts_tok(series), rng)
        p_tok = self.tab_proj(t_enc)
        zs_tok = self.ts_proj(s_enc)
        logits = self.fusion(p_tok, p_tok, zs_tok)
        pooled = p_tok.mean(axis=1)
        triple = EmbeddingTriple(z_s=zs_tok.mean(axis=1), z_t_sh=pooled, z_t_sp=pooled)
        return logits, triple


class ConcatSAFusionModel(_Base):
    """Token-concatenation self-attention fusion: CLS plus every token from
    both modalities in one stream, attention-only blocks, CLS head.
    With decoupling, the concatenated stream carries the decoupled tokens
    and the triple is exported; without it, single projections are used."""

    has_triple = True

    def __init__(self, cfg, schema, n_series, t_len, seed, decoupled: bool):
        super().__init__(cfg, schema, n_series, t_len, seed)
        self.variant = "no_asym_fusion" if decoupled else "neither"
        self.decoupled = decoupled
        self.trains_decoupling = decoupled
        d = cfg.encoder.embed_dim
        rng = self.rng_init
        self.tab_tok = TabularTokenizer(self.store, "tab_tok", schema, d, rng)
        self.ts_tok = TimeSeriesTokenizer(self.store, "ts_tok", n_series, t_len, d, rng)
        self.tab_enc = Encoder(self.store, "tab_enc", cfg.encoder, rng)
        self.ts_enc = Encoder(self.store, "ts_enc", cfg.encoder, rng)
        if decoupled:
            self.projector = DecouplingProjector(self.store, "dec", d, d, cfg.decoupling.d_z, rng)
        else:
            self.tab_proj = Linear(self.store, "proj.tab", d, cfg.decoupling.d_z, rng)
            self.ts_proj = Linear(self.store, "proj.ts", d, cfg.decoupling.d_z, rng)
        self.cls = self.store.add("fuse.cls", rng.normal(0.0, 0.02, (d,)))
        self.sa_blocks = [
            SelfAttentionBlock(self.store, f"fuse.sa{i}", d, cfg.fusion.n_heads, rng)
            for i in range(2 * cfg.fusion.n_rounds)
        ]
        self.head = Linear(self.store, "fuse.head", d, cfg.fusion.n_classes, rng)

    def forward(self, x_num, x_cat, series, rng=None):
        t_enc = self.tab_enc(self.tab_tok(x_num, x_cat), rng)
        s_enc = self.ts_enc(self.ts_tok(series), rng)
        if self.decoupled:
            sh_tok, sp_tok, zs_tok = self.projector.project_tokens(t_enc, s_enc)
            parts = [sp_tok, sh_tok, zs_tok]
            triple = EmbeddingTriple(
                z_s=zs_tok.mean(axis=1),
                z_t_sh=sh_tok.mean(axis=1),
                z_t_sp=sp_tok.mean(axis=1),
            )
        else:
            p_tok = self.tab_proj(t_enc)
            zs_tok = self.ts_proj(s_enc)
            parts = [p_tok, zs_tok]
            pooled = p_tok.mean(axis=1)
            triple = EmbeddingTriple(z_s=zs_tok.mean(axis=1), z_t_sh=pooled, z_t_sp=pooled)
        n = parts[0].data.shape[0]
        d = self.cfg.encoder.embed_dim
        cls_tok = self.cls.reshape(1, 1, d) + np.zeros((n, 1, d))
        stream = T.concatenate([cls_tok] + parts, axis=1)
        for block in self.sa_blocks:
            stream = block(stream)
        return self.head(stream[:, 0]), triple


class MlpConcatModel(_Base):
    """Mean-pooled tokenizer embeddings of both modalities, concatenated
    into a two-layer perceptron. No attention anywhere."""

    variant = "mlp_concat"

    def __init__(self, cfg, schema, n_series, t_len, seed):
        super().__init__(cfg, schema, n_series, t_len, seed)
        d = cfg.encoder.embed_dim
        rng = self.rng_init
        self.tab_tok = TabularTokenizer(self.store, "tab_tok", schema, d, rng)
        self.ts_tok = TimeSeriesTokenizer(self.store, "ts_tok", n_series, t_len, d, rng)
        self.hidden = Linear(self.store, "mlp.hidden", 2 * d, 2 * d, rng)
        self.out = Linear(self.store, "mlp.out", 2 * d, cfg.fusion.n_classes, rng)

    def forward(self, x_num, x_cat, series, rng=None):
        t_pool = self.tab_tok(x_num, x_cat).mean(axis=1)
        s_pool = self.ts_tok(series).mean(axis=1)
        joint = T.concatenate([t_pool, s_pool], axis=1)
        return self.out(T.relu(self.hidden(joint))), None


class FtConcatModel(_Base):
    """All tokens of both modalities plus CLS through one unified
    self-attention encoder; head on CLS."""

    variant = "ft_concat"

    def __init__(self, cfg, schema, n_series, t_len, seed):
        super().__init__(cfg, schema, n_series, t_len, seed)
        d = cfg.encoder.embed_dim
        rng = self.rng_init
        self.tab_tok = TabularTokenizer(self.store, "tab_tok", schema, d, rng)
        self.ts_tok = TimeSeriesTokenizer(self.store, "ts_tok", n_series, t_len, d, rng)
        self.encoder = Encoder(self.store, "enc", cfg.encoder, rng)
        self.cls = self.store.add("cls", rng.normal(0.0, 0.02, (d,)))
        self.head = Linear(self.store, "head", d, cfg.fusion.n_classes, rng)

    def forward(self, x_num, x_cat, series, rng=None):
        t_tok = self.tab_tok(x_num, x_cat)
        s_tok = self.ts_tok(series)
        n = t_tok.data.shape[0]
        d = self.cfg.encoder.embed_dim
        cls_tok = self.cls.reshape(1, 1, d) + np.zeros((n, 1, d))
        stream = T.concatenate([cls_tok, t_tok, s_tok], axis=1)
        stream = self.encoder(stream, rng)
        return self.head(stream[:, 0]), None


class SymmetricCrossModel(_Base):
    """Two mirrored streams (tabular and time-series), each with its own
    CLS, alternating self-attention and cross-attention into the other
    stream; the two CLS states are averaged before the head."""

    variant = "symmetric_cross"

    def __init__(self, cfg, schema, n_series, t_len, seed):
        super().__init__(cfg, schema, n_series, t_len, seed)
        d = cfg.encoder.embed_dim
        h = cfg.fusion.n_heads
        rng = self.rng_init
        self.tab_tok = TabularTokenizer(self.store, "tab_tok", schema, d, rng)
        self.ts_tok = TimeSeriesTokenizer(self.store, "ts_tok", n_series, t_len, d, rng)
        self.tab_enc = Encoder(self.store, "tab_enc", cfg.encoder, rng)
        self.ts_enc = Encoder(self.store, "ts_enc", cfg.encoder, rng)
        self.cls_a = self.store.add("sym.cls_a", rng.normal(0.0, 0.02, (d,)))
        self.cls_b = self.store.add("sym.cls_b", rng.normal(0.0, 0.02, (d,)))
        rounds = cfg.fusion.n_rounds
        self.sa_a = [SelfAttentionBlock(self.store, f"sym.sa_a{i}", d, h, rng) for i in range(rounds)]
        self.sa_b = [SelfAttentionBlock(self.store, f"sym.sa_b{i}", d, h, rng) for i in range(rounds)]
        self.ca_a = [CrossAttentionBlock(self.store, f"sym.ca_a{i}", d, h, rng) for i in range(rounds)]
        self.ca_b = [CrossAttentionBlock(self.store, f"sym.ca_b{i}", d, h, rng) for i in range(rounds)]
        self.head = Linear(self.store, "sym.head", d, cfg.fusion.n_classes, rng)

    def forward(self, x_num, x_cat, series, rng=None):
        d = self.cfg.encoder.embed_dim
        t_enc = self.tab_enc(self.tab_tok(x_num, x_cat), rng)
        s_enc = self.ts_enc(self.ts_tok(series), rng)
        n = t_enc.data.shape[0]
        a = T.concatenate([self.cls_a.reshape(1, 1, d) + np.zeros((n, 1, d)), t_enc], axis=1)
        b = T.concatenate([self.cls_b.reshape(1, 1, d) + np.zeros((n, 1, d)), s_enc], axis=1)
        for i in range(self.cfg.fusion.n_rounds):
            a1 = self.sa_a[i](a)
            b1 = self.sa_b[i](b)
            a = self.ca_a[i](a1, b1)
            b = self.ca_b[i](b1, a1)
        cls = (a[:, 0] + b[:, 0]) * 0.5
        return self.head(cls), None


class UnimodalModel(_Base):
    """Single-modality encoder with mean pooling and a linear head."""

    def __init__(self, cfg, schema, n_series, t_len, seed, modality: str):
        super().__init__(cfg, schema, n_series, t_len, seed)
        self.variant = f"{modality}_only"
        self.modality = modality
        d = cfg.encoder.embed_dim
        rng = self.rng_init
        if modality == "tab":
            self.tok = TabularTokenizer(self.store, "tab_tok", schema, d, rng)
        else:
            self.tok = TimeSeriesTokenizer(self.store, "ts_tok", n_series, t_len, d, rng)
        self.encoder = Encoder(self.store, "enc", cfg.encoder, rng)
        self.head = Linear(self.store, "head", d, cfg.fusion.n_classes, rng)

    def forward(self, x_num, x_cat, series, rng=None):
        tokens = self.tok(x_num, x_cat) if self.modality == "tab" else self.tok(series)
        return self.head(self.encoder(tokens, rng).mean(axis=1)), None


def build_variant(variant: str, cfg: ModelConfig, schema: TabularSchema,
                  n_series: int, t_len: int, seed: int = 0):
    """Construct (and freeze) the requested model variant."""
    if variant == "dafted":
        model = DaftedModel(cfg, schema, n_series, t_len, seed)
    elif variant == "no_decoupling":
        model = NoDecouplingModel(cfg, schema, n_series, t_len, seed)
    elif variant == "no_asym_fusion":
        model = ConcatSAFusionModel(cfg, schema, n_series, t_len, seed, decoupled=True)
    elif variant == "neither":
        model = ConcatSAFusionModel(cfg, schema, n_series, t_len, seed, decoupled=False)
    elif variant == "mlp_concat":
        model = MlpConcatModel(cfg, schema, n_series, t_len, seed)
    elif variant == "ft_concat":
        model = FtConcatModel(cfg, schema, n_series, t_len, seed)
    elif variant == "symmetric_cross":
        model = SymmetricCrossModel(cfg, schema, n_series, t_len, seed)
    elif variant == "tab_only":
        model = UnimodalModel(cfg, schema, n_series, t_len, seed, "tab")
    elif variant == "ts_only":
        model = UnimodalModel(cfg, schema, n_series, t_len, seed, "ts")
    else:
        raise ConfigError(f"unknown model variant {variant!r}; valid: {VARIANTS}")
    return model.finalize()
