"""Variant zoo: construction, forward contracts, and the structural
differences between ablations."""

import numpy as np
import pytest

from dafted.data import Dataset
from dafted.decoupling import DecouplingConfig
from dafted.encoders import EncoderConfig, TabularSchema
from dafted.errors import ConfigError
from dafted.fusion import FusionConfig
from dafted.models import ModelConfig, VARIANTS, build_variant, paper_scale

RNG = np.random.default_rng(4242)

SCHEMA = TabularSchema(
    numeric_features=("age", "bmi", "sbp"),
    categorical_features=(("sex", 2),),
)
N_SERIES, T_LEN = 2, 6


def tiny_config(n_classes=3, n_rounds=1):
    return ModelConfig(
        encoder=EncoderConfig(embed_dim=8, n_heads=2, n_blocks=1, dropout_rate=0.0),
        decoupling=DecouplingConfig(d_z=8),
        fusion=FusionConfig(embed_dim=8, n_heads=2, n_classes=n_classes,
                            n_rounds=n_rounds),
    )


def batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return (
        rng.standard_normal((n, 3)),
        rng.integers(0, 2, size=(n, 1)),
        rng.standard_normal((n, N_SERIES, T_LEN)),
    )


def build(variant, seed=0, **kw):
    return build_variant(variant, tiny_config(**kw), SCHEMA, N_SERIES, T_LEN, seed=seed)


# ---------------------------------------------------------------------------
# construction and forward contracts


def test_variant_enum_is_complete():
    assert set(VARIANTS) == {
        "dafted", "no_decoupling", "no_asym_fusion", "neither",
        "mlp_concat", "ft_concat", "symmetric_cross", "tab_only", "ts_only",
    }


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_builds_and_classifies(variant):
    model = build(variant)
    x_num, x_cat, series = batch(5)
    logits, triple = model(x_num, x_cat, series)
    assert logits.data.shape == (5, 3)
    assert np.all(np.isfinite(logits.data))
    if model.has_triple:
        assert triple is not None
        for z in (triple.z_s, triple.z_t_sh, triple.z_t_sp):
            assert z.data.shape == (5, 8)
    else:
        assert triple is None


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        build_variant("transformer_xl", tiny_config(), SCHEMA, N_SERIES, T_LEN)


def test_width_mismatch_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(
            encoder=EncoderConfig(embed_dim=8, n_heads=2),
            decoupling=DecouplingConfig(d_z=8),
            fusion=FusionConfig(embed_dim=16, n_heads=2),
        )


def test_paper_scale_dimensions():
    cfg = paper_scale()
    assert cfg.encoder.embed_dim == 192
    assert cfg.encoder.n_blocks == 3
    assert cfg.fusion.n_heads == 8


# ---------------------------------------------------------------------------
# structural differences between variants


def test_decoupling_trained_only_where_it_exists():
    flags = {v: build(v).trains_decoupling for v in VARIANTS}
    assert flags["dafted"] and flags["no_asym_fusion"]
    for v in ("no_decoupling", "neither", "mlp_concat", "ft_concat",
              "symmetric_cross", "tab_only", "ts_only"):
        assert not flags[v], v


def test_no_decoupling_exports_identical_shared_and_specific():
    model = build("no_decoupling")
    _, triple = model(*batch(6))
    assert np.array_equal(triple.z_t_sh.data, triple.z_t_sp.data)


def test_dafted_shared_and_specific_differ():
    model = build("dafted")
    _, triple = model(*batch(6))
    assert not np.array_equal(triple.z_t_sh.data, triple.z_t_sp.data)


def test_cross_attention_weights_shared_across_rounds():
    # cross-attention parameters must not grow with n_rounds
    def ca_params(model):
        return sum(int(np.prod(t.data.shape))
                   for n, t in model.store._tensors.items() if ".ca." in n)

    p1 = ca_params(build("dafted", n_rounds=1))
    p3 = ca_params(build("dafted", n_rounds=3))
    assert p1 == p3 > 0


def test_concat_fusion_depth_tracks_rounds():
    # the token-concatenation fallback has no weight sharing to preserve
    n1 = build("neither", n_rounds=1).n_params
    n2 = build("neither", n_rounds=2).n_params
    assert n2 > n1


def test_param_count_equals_store_enumeration():
    model = build("dafted")
    total = sum(int(np.prod(t.data.shape)) for t in model.store._tensors.values())
    assert model.n_params == total == model.store.n_params


def test_same_seed_same_init_different_seed_differs():
    a = build("dafted", seed=5).store.flat
    b = build("dafted", seed=5).store.flat
    c = build("dafted", seed=6).store.flat
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_unimodal_models_ignore_other_modality():
    x_num, x_cat, series = batch(4)
    tab = build("tab_only")
    l1, _ = tab(x_num, x_cat, series)
    l2, _ = tab(x_num, x_cat, series * 100.0)
    assert np.array_equal(l1.data, l2.data)
    ts = build("ts_only")
    l3, _ = ts(x_num, x_cat, series)
    l4, _ = ts(x_num * 100.0, x_cat, series)
    assert np.array_equal(l3.data, l4.data)


def test_mlp_concat_has_no_attention_parameters():
    model = build("mlp_concat")
    names = list(model.store._tensors)
    assert not any(".attn." in n or ".block" in n for n in names)


def test_finalize_freezes_store():
    model = build("dafted")
    assert model.store.flat is not None
