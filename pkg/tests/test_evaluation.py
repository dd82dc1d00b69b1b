"""Metrics vs brute-force oracles, the internal t distribution, alternative
contrastive baselines, embedding export, and the sweep/grid runner."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dafted.tensor as T
from dafted.data import Dataset, TabularSchema
from dafted.decoupling import DecouplingConfig
from dafted.errors import (ConfigError, ContractError,
                           DegenerateVarianceError, MetricError, ShapeError)
from dafted.evaluation import (
    SWEEPABLE_PARAMS, alternative_loss, apply_sweep_value, auprc_macro,
    collect_triple, execute_runs, export_embeddings, f1_macro, infonce_loss,
    metric_report, paired_ttest, pairwise_ttests, read_embeddings,
    read_sweep_csv, roc_auc_ovr_macro, run_sweep, separation_statistic,
    supervised_clip_loss, triplet_loss, variant_grid_specs, write_sweep_csv,
    RunSpec,
)
from dafted.models import ModelConfig, EncoderConfig, FusionConfig, build_variant
from dafted.tensor import Tensor
from dafted.training import TrainConfig, train
from oracles import (auprc_ref, auroc_ref, f1_macro_ref, infonce_ref,
                     reg_ref, triplet_ref)

SCHEMA = TabularSchema(numeric_features=("a", "b", "c"),
                       categorical_features=(("flag", 2),))


def tiny_config() -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(embed_dim=8, n_heads=2, n_blocks=1,
                              ffn_multiplier=2, dropout_rate=0.0),
        decoupling=DecouplingConfig(d_z=8),
        fusion=FusionConfig(n_rounds=1, embed_dim=8, n_heads=2, n_classes=3),
    )


def tiny_dataset(n: int, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 3).astype(np.int64)
    x_num = rng.normal(size=(n, 3)) * 0.3
    x_num[:, 0] += y.astype(np.float64)
    t = np.linspace(0.0, 1.0, 6)
    series = rng.normal(size=(n, 2, 6)) * 0.2
    series += np.sin(2.0 * np.pi * (y[:, None, None] + 1.0) * t)
    return Dataset(x_num=x_num, x_cat=(y % 2).reshape(n, 1).astype(np.int64),
                   series=series, y=y,
                   sample_ids=np.array([f"s{i:04d}" for i in range(n)]))


def fast_cfg(**kw) -> TrainConfig:
    base = dict(epochs=1, batch_size=16, learning_rate=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _random_scored_labels(rng, n, c, with_ties=False):
    y = rng.integers(0, c, size=n)
    y[:c] = np.arange(c)  # honor the every-class-present precondition
    s = rng.normal(size=(n, c))
    if with_ties:
        s = np.round(s, 1)
    return s, y


# ---------------------------------------------------------------------------
# classification metrics

def test_perfect_scores_hit_the_ceiling():
    y = np.array([0, 0, 1, 1, 2, 2])
    s = np.eye(3)[y] * 5.0
    assert roc_auc_ovr_macro(s, y) == 1.0
    assert auprc_macro(s, y) == 1.0
    assert f1_macro(np.argmax(s, axis=1), y, 3) == 1.0


def test_all_tied_scores_give_half_auc():
    y = np.array([0, 1, 2, 0, 1, 2])
    s = np.ones((6, 3)) * 0.7
    assert roc_auc_ovr_macro(s, y) == 0.5


def test_two_class_example_and_label_flip():
    s = np.array([[.9, .1], [.8, .2], [.3, .7], [.2, .8]])
    assert roc_auc_ovr_macro(s, np.array([0, 0, 1, 1])) == 1.0
    y = np.array([0, 1, 1, 1])
    want = np.mean([auroc_ref((y == c).astype(int), s[:, c]) for c in (0, 1)])
    assert abs(roc_auc_ovr_macro(s, y) - want) < 1e-12


def test_metrics_match_brute_force_oracles():
    rng = np.random.default_rng(42)
    for k in range(50):
        n, c = int(rng.integers(6, 50)), int(rng.integers(2, 5))
        s, y = _random_scored_labels(rng, n, c, with_ties=(k % 3 == 0))
        preds = np.argmax(s, axis=1)
        auc_ref = np.mean([auroc_ref((y == i).astype(int), s[:, i])
                           for i in range(c)])
        ap_ref = np.mean([auprc_ref((y == i).astype(int), s[:, i])
                          for i in range(c)])
        assert abs(roc_auc_ovr_macro(s, y) - auc_ref) < 1e-10
        assert abs(auprc_macro(s, y) - ap_ref) < 1e-10
        assert abs(f1_macro(preds, y, c) - f1_macro_ref(y, preds, c)) < 1e-10


def test_auc_invariant_under_monotone_column_transforms():
    rng = np.random.default_rng(7)
    s, y = _random_scored_labels(rng, 40, 3)
    base = roc_auc_ovr_macro(s, y)
    warped = np.stack([2.0 * s[:, 0] + 1.0, s[:, 1] ** 3,
                       np.tanh(s[:, 2])], axis=1)
    assert roc_auc_ovr_macro(warped, y) == base


def test_one_class_predictions_closed_form():
    # balanced 3-class truth, everything predicted as class 0:
    # F1(class 0) = 2*(1/3)/(1 + 1/3) = 1/2, other classes 0 -> macro 1/6
    y = np.array([0, 1, 2] * 4)
    preds = np.zeros(12, dtype=np.int64)
    assert abs(f1_macro(preds, y, 3) - 1.0 / 6.0) < 1e-15


def test_metric_preconditions():
    s = np.random.default_rng(0).normal(size=(6, 3))
    with pytest.raises(MetricError, match="class 2"):
        roc_auc_ovr_macro(s, np.array([0, 1, 0, 1, 0, 1]))
    with pytest.raises(MetricError):
        roc_auc_ovr_macro(s, np.array([0, 1, 2, 0, 1, 3]))
    with pytest.raises(MetricError):
        roc_auc_ovr_macro(s[:, :1], np.zeros(6, dtype=np.int64))
    with pytest.raises(ShapeError):
        roc_auc_ovr_macro(s, np.array([0, 1, 2]))
    with pytest.raises(ShapeError):
        auprc_macro(s.ravel(), np.zeros(18, dtype=np.int64))


def test_metric_report_is_consistent_and_serializable():
    rng = np.random.default_rng(3)
    s, y = _random_scored_labels(rng, 30, 3)
    rep = metric_report(s, y)
    assert rep.n_samples == 30
    assert len(rep.per_class) == 3
    assert abs(rep.auroc_macro - np.mean([c.auroc for c in rep.per_class])) < 1e-15
    assert rep.auroc_macro == roc_auc_ovr_macro(s, y)
    assert rep.auprc_macro == auprc_macro(s, y)
    assert rep.f1_macro == f1_macro(np.argmax(s, axis=1), y, 3)
    for c in rep.per_class:
        for v in (c.auroc, c.auprc, c.f1):
            assert 0.0 <= v <= 1.0
    assert sum(c.support for c in rep.per_class) == 30
    json.dumps(rep.to_plain())  # must be plain data


@settings(deadline=None, max_examples=40)
@given(st.lists(st.integers(0, 2), min_size=6, max_size=30),
       st.integers(0, 2 ** 31 - 1))
def test_auc_flip_symmetry(labels, seed):
    """Negating a binary problem's scores and labels preserves the AUC."""
    y = np.array(labels, dtype=np.int64) % 2
    if not (np.any(y == 0) and np.any(y == 1)):
        y[0], y[1] = 0, 1
    rng = np.random.default_rng(seed)
    col = np.round(rng.normal(size=y.size), 1)
    s = np.stack([-col, col], axis=1)
    a = roc_auc_ovr_macro(s, y)
    flipped = roc_auc_ovr_macro(np.stack([col, -col], axis=1), 1 - y)
    assert abs(a - flipped) < 1e-12


# ---------------------------------------------------------------------------
# paired t-test

def test_paired_ttest_hand_example():
    r = paired_ttest([1.0, 2.0, 4.0], [0.0, 1.0, 2.0])
    assert abs(r.t_statistic - 4.0) < 1e-12
    assert abs(r.mean_difference - 4.0 / 3.0) < 1e-15
    assert r.n_pairs == 3
    # frozen two-sided p for t=4, df=2 (cross-checked against scipy below)
    assert abs(r.p_value - 0.05719095841793663) < 1e-10


def test_paired_ttest_antisymmetry():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = rng.normal(size=8)
        b = a + rng.normal(size=8) * 0.5
        fwd, rev = paired_ttest(a, b), paired_ttest(b, a)
        assert abs(fwd.t_statistic + rev.t_statistic) < 1e-12
        assert abs(fwd.p_value - rev.p_value) < 1e-14
        assert 0.0 < fwd.p_value <= 1.0


def test_paired_ttest_p_values_match_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    from dafted.evaluation import _student_t_two_sided_p
    for t in (0.0, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 20.0):
        for df in (1, 2, 3, 4, 9, 29, 99):
            want = 2.0 * float(scipy_stats.t.sf(t, df))
            assert abs(_student_t_two_sided_p(t, df) - want) < 1e-8


def test_paired_ttest_degenerate_and_shape_errors():
    with pytest.raises(DegenerateVarianceError):
        paired_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateVarianceError):
        paired_ttest([1.0, 2.0], [0.0, 1.0])  # constant difference
    with pytest.raises(ContractError):
        paired_ttest([1.0], [2.0])
    with pytest.raises(ShapeError):
        paired_ttest([1.0, 2.0], [1.0, 2.0, 3.0])


def test_pairwise_ttests_covers_all_pairs():
    rng = np.random.default_rng(9)
    vals = {k: list(rng.normal(size=5) + i) for i, k in
            enumerate(["w", "x", "y", "z"])}
    out = pairwise_ttests(vals)
    assert [(a, b) for a, b, _ in out] == [
        ("w", "x"), ("w", "y"), ("w", "z"), ("x", "y"), ("x", "z"), ("y", "z")]
    direct = paired_ttest(vals["w"], vals["y"])
    assert out[1][2] == direct


# ---------------------------------------------------------------------------
# alternative contrastive baselines

def test_infonce_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n, d = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        za, zb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        got = float(infonce_loss(Tensor(za), Tensor(zb), 0.2).data)
        assert abs(got - infonce_ref(za, zb, 0.2)) < 1e-10
        assert got >= -1e-12  # positives stay in the denominator


def test_infonce_single_candidate_is_zero():
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(1, 5)))
    w = Tensor(rng.normal(size=(1, 5)))
    assert abs(float(infonce_loss(z, w, 0.1).data)) < 1e-12


def test_triplet_matches_oracle_and_hinges():
    rng = np.random.default_rng(13)
    for _ in range(10):
        n, d = int(rng.integers(2, 9)), int(rng.integers(3, 7))
        za, zb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        got = float(triplet_loss(Tensor(za), Tensor(zb)).data)
        assert abs(got - triplet_ref(za, zb, 0.3)) < 1e-10
    # orthogonal negatives, identical positives: hinge fully satisfied
    eye = np.eye(4)
    assert float(triplet_loss(Tensor(eye), Tensor(eye.copy())).data) == 0.0


def test_triplet_gradient_flows_through_selected_pairs():
    rng = np.random.default_rng(17)
    za = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    zb = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    loss = triplet_loss(za, zb)
    assert float(loss.data) > 0.0
    T.backward(loss)
    assert np.isfinite(za.grad.data).all()
    assert np.any(za.grad.data != 0.0) and np.any(zb.grad.data != 0.0)


def test_supervised_clip_is_the_label_supervised_pull():
    rng = np.random.default_rng(19)
    n, d = 7, 5
    za, zb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    y = rng.integers(0, 3, size=n)
    cfg = DecouplingConfig(tau=0.15, d_z=d)
    got = float(supervised_clip_loss(Tensor(za), Tensor(zb), y, cfg).data)
    assert abs(got - reg_ref(za, zb, y, 0.15)) < 1e-10


def test_alternative_loss_dispatch():
    rng = np.random.default_rng(2)
    za, zb = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    y = np.array([0, 1, 0, 1])
    cfg = DecouplingConfig(tau=0.1, d_z=3)
    for kind in ("infonce", "triplet", "supervised_clip"):
        assert np.isfinite(float(alternative_loss(kind, za, zb, y, cfg).data))
    with pytest.raises(ConfigError):
        alternative_loss("simclr", za, zb, y, cfg)


# ---------------------------------------------------------------------------
# embeddings

def test_separation_statistic_closed_form():
    z_s = np.array([[1.0, 0.0], [0.0, 2.0]])
    z_sh = np.array([[3.0, 0.0], [0.0, 0.5]])   # colinear: cos 1 each
    z_sp = np.array([[0.0, 1.0], [4.0, 0.0]])   # orthogonal: cos 0 each
    assert abs(separation_statistic(z_s, z_sh, z_sp) - 1.0) < 1e-15


def test_export_roundtrip_and_separation_from_file(tmp_path):
    tr, va = tiny_dataset(32), tiny_dataset(16, seed=1)
    res = train(tr, va, tiny_config(), fast_cfg(), SCHEMA)
    path = str(tmp_path / "emb.csv")
    export_embeddings(res.model, va, path)

    ids, labels, mats = read_embeddings(path)
    assert len(ids) == 16 and len(labels) == 16
    with open(path) as fh:
        assert sum(1 for _ in fh) == 3 * 16 + 1  # header + 3 rows per sample
    z_s, z_sh, z_sp = collect_triple(res.model, va)
    np.testing.assert_array_equal(mats["ts"], z_s)          # 17 sig digits
    np.testing.assert_array_equal(mats["tab_shared"], z_sh)  # round-trip
    np.testing.assert_array_equal(mats["tab_specific"], z_sp)
    np.testing.assert_array_equal(labels, va.y)

    in_mem = separation_statistic(z_s, z_sh, z_sp)
    from_file = separation_statistic(mats["ts"], mats["tab_shared"],
                                     mats["tab_specific"])
    assert abs(in_mem - from_file) < 1e-12


def test_export_requires_a_triple_producing_variant(tmp_path):
    model = build_variant("mlp_concat", tiny_config(), SCHEMA, 2, 6, seed=0)
    with pytest.raises(ContractError, match="mlp_concat"):
        export_embeddings(model, tiny_dataset(8), str(tmp_path / "x.csv"))


def test_read_embeddings_rejects_other_csvs(tmp_path):
    p = tmp_path / "other.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ContractError):
        read_embeddings(str(p))


# ---------------------------------------------------------------------------
# grid runner and sweeps

def test_execute_runs_preserves_order_and_collects_metrics():
    tr, va, te = tiny_dataset(32), tiny_dataset(16, 1), tiny_dataset(16, 2)
    specs = variant_grid_specs(["dafted", "mlp_concat"], [0, 1],
                               tiny_config(), fast_cfg())
    assert [s.key for s in specs] == [
        "dafted/seed0", "dafted/seed1", "mlp_concat/seed0", "mlp_concat/seed1"]
    outs = execute_runs(specs, tr, va, te, SCHEMA)
    assert [o.key for o in outs] == [s.key for s in specs]
    for o in outs:
        assert o.ok and 0.0 <= o.test_auroc <= 1.0
        assert np.isfinite(o.best_val_loss)
    assert outs[0].val_separation is not None   # dafted exports a triple
    assert outs[2].val_separation is None       # mlp_concat does not
    json_ready = [o.to_plain() for o in outs]
    json.dumps(json_ready)


def test_variant_grid_shares_seeds_for_paired_tests():
    specs = variant_grid_specs(["dafted", "neither", "no_decoupling",
                                "no_asym_fusion"], list(range(5)),
                               tiny_config(), fast_cfg())
    assert len(specs) == 20
    by_variant = {}
    for s in specs:
        by_variant.setdefault(s.train_cfg.model_variant, []).append(s.train_cfg.seed)
    assert all(seeds == list(range(5)) for seeds in by_variant.values())


def test_run_sweep_rows_and_csv_roundtrip(tmp_path):
    tr, va, te = tiny_dataset(32), tiny_dataset(16, 1), tiny_dataset(16, 2)
    rows = run_sweep("lambda", [0.0, 1.0], [0, 1], tr, va, te, SCHEMA,
                     tiny_config(), fast_cfg())
    assert [r.value for r in rows] == [0.0, 1.0]
    for r in rows:
        assert r.n_failed == 0 and len(r.cells) == 2
        assert [c.seed for c in r.cells] == [0, 1]
        assert 0.0 <= r.mean_auroc <= 1.0 and r.std_auroc >= 0.0

    path = str(tmp_path / "grid.csv")
    write_sweep_csv(path, rows)
    back = read_sweep_csv(path)
    assert [(r.param, r.value) for r in back] == [(r.param, r.value) for r in rows]
    for got, want in zip(back, rows):
        assert got.mean_auroc == want.mean_auroc  # 17 sig digits: exact
        assert [c.auroc for c in got.cells] == [c.auroc for c in want.cells]


def test_run_sweep_records_bad_grid_value_as_failed_row():
    tr, va, te = tiny_dataset(32), tiny_dataset(16, 1), tiny_dataset(16, 2)
    rows = run_sweep("tau", [0.1, -1.0], [0, 1], tr, va, te, SCHEMA,
                     tiny_config(), fast_cfg())
    assert rows[0].n_failed == 0
    assert rows[1].n_failed == 2 and rows[1].mean_auroc is None
    assert "tau" in rows[1].cells[0].error


def test_run_sweep_input_validation():
    tr, va, te = tiny_dataset(8), tiny_dataset(8, 1), tiny_dataset(8, 2)
    with pytest.raises(ConfigError):
        run_sweep("lambda", [], [0], tr, va, te, SCHEMA, tiny_config(), fast_cfg())
    with pytest.raises(ConfigError):
        run_sweep("lambda", [1.0], [], tr, va, te, SCHEMA, tiny_config(), fast_cfg())
    with pytest.raises(ConfigError):
        run_sweep("dropout", [0.1], [0], tr, va, te, SCHEMA, tiny_config(), fast_cfg())


def test_apply_sweep_value_targets_the_right_knob():
    mc, tc = tiny_config(), fast_cfg()
    m2, t2 = apply_sweep_value(mc, tc, "lambda", 2.0)
    assert t2.lambda_decoupling == 2.0 and m2 is mc
    m3, t3 = apply_sweep_value(mc, tc, "tau", 0.5)
    assert m3.decoupling.tau == 0.5 and t3 is tc
    m4, t4 = apply_sweep_value(mc, tc, "batch_size", 32.0)
    assert t4.batch_size == 32 and isinstance(t4.batch_size, int)
    assert set(SWEEPABLE_PARAMS) >= {"lambda", "tau", "w_shsd", "w_reg"}
    with pytest.raises(ConfigError):
        apply_sweep_value(mc, tc, "momentum", 0.9)


def test_parallel_runs_match_serial_exactly():
    """jobs > 1 moves runs into worker processes; results and order must be
    indistinguishable from the serial path."""
    tr, va, te = tiny_dataset(32), tiny_dataset(16, 1), tiny_dataset(16, 2)
    specs = variant_grid_specs(["dafted", "tab_only"], [0, 1],
                               tiny_config(), fast_cfg())
    serial = execute_runs(specs, tr, va, te, SCHEMA, jobs=1)
    parallel = execute_runs(specs, tr, va, te, SCHEMA, jobs=2)
    assert [o.key for o in serial] == [o.key for o in parallel]
    for a, b in zip(serial, parallel):
        assert a.test_auroc == b.test_auroc
        assert a.best_val_loss == b.best_val_loss
        assert a.val_separation == b.val_separation
    with pytest.raises(ConfigError):
        execute_runs(specs, tr, va, te, SCHEMA, jobs=0)
