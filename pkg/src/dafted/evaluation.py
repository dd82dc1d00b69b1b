"""Classification metrics, paired statistics, alternative contrastive
baselines, embedding export, and the grid runner behind ablations and
hyperparameter sweeps.

Metrics are pure functions over numpy arrays. The grid runner executes
independent training runs (optionally in worker processes), records
failures instead of dying, and merges results in task order so output
files do not depend on scheduling.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Dataset, TabularSchema
from .decoupling import (DecouplingConfig, EmbeddingTriple, pairwise_cosine,
                         regularization_loss)
from .errors import (ConfigError, ContractError, DaftedError,
                     DegenerateInputError, DegenerateVarianceError,
                     MetricError, NumericsError, ShapeError)
from .models import ModelConfig
from .tensor import Tensor
from .training import TrainConfig, predict_proba_dataset, train

__all__ = [
    "MetricReport", "TTestResult", "RunSpec", "RunOutcome", "SweepCell",
    "SweepRow",
    "roc_auc_ovr_macro", "auprc_macro", "f1_macro", "metric_report",
    "paired_ttest", "pairwise_ttests",
    "infonce_loss", "triplet_loss", "supervised_clip_loss",
    "alternative_loss",
    "collect_triple", "separation_statistic", "export_embeddings",
    "read_embeddings",
    "execute_runs", "variant_grid_specs", "apply_sweep_value", "run_sweep",
    "write_sweep_csv", "read_sweep_csv", "SWEEPABLE_PARAMS",
]

TRIPLET_MARGIN = 0.3


# ---------------------------------------------------------------------------
# metric plumbing

def _scores_matrix(scores) -> np.ndarray:
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"scores must be 2-D (n, classes), got shape {s.shape}")
    if s.shape[1] < 2:
        raise MetricError("one-vs-rest metrics need at least two classes")
    return s


def _checked_labels(y, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise ShapeError(f"labels shape {y.shape} does not match {n_rows} rows")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise MetricError(
            f"label {int(y.min()) if y.min() < 0 else int(y.max())} outside "
            f"[0, {n_classes})")
    for c in range(n_classes):
        if not np.any(y == c):
            raise MetricError(f"class {c} absent from labels")
    return y


def _average_ranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their rank span."""
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    ss = s[order]
    i = 0
    while i < ss.size:
        j = i + 1
        while j < ss.size and ss[j] == ss[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)
        i = j
    return ranks


def _binary_auroc(pos: np.ndarray, s: np.ndarray) -> float:
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    ranks = _average_ranks(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _binary_auprc(pos: np.ndarray, s: np.ndarray) -> float:
    """Average precision: precision summed over recall steps, evaluated at
    each distinct score threshold (descending)."""
    order = np.argsort(-s, kind="mergesort")
    hits = pos[order].astype(np.float64)
    s_sorted = s[order]
    tp = np.cumsum(hits)
    # indices closing each tie block = the distinct-threshold cut points
    cuts = np.nonzero(np.diff(s_sorted))[0]
    cuts = np.append(cuts, s_sorted.size - 1)
    precision = tp[cuts] / (cuts + 1.0)
    recall = tp[cuts] / tp[-1]
    return float(np.sum(np.diff(np.concatenate(([0.0], recall))) * precision))


def roc_auc_ovr_macro(scores, y) -> float:
    """Macro one-vs-rest ROC AUC with rank-averaged ties.

    Column c of ``scores`` is scored against the indicator ``y == c``;
    the macro value is the unweighted mean over classes.
    """
    s = _scores_matrix(scores)
    y = _checked_labels(y, s.shape[0], s.shape[1])
    return float(np.mean([_binary_auroc(y == c, s[:, c])
                          for c in range(s.shape[1])]))


def auprc_macro(scores, y) -> float:
    s = _scores_matrix(scores)
    y = _checked_labels(y, s.shape[0], s.shape[1])
    return float(np.mean([_binary_auprc(y == c, s[:, c])
                          for c in range(s.shape[1])]))


def f1_macro(preds, y, n_classes: Optional[int] = None) -> float:
    """Macro F1 over integer predictions; 0/0 ratios resolve to 0."""
    preds = np.asarray(preds, dtype=np.int64)
    if preds.ndim != 1:
        raise ShapeError(f"predictions must be 1-D, got shape {preds.shape}")
    if n_classes is None:
        n_classes = int(max(preds.max(initial=0), np.asarray(y).max())) + 1
    y = _checked_labels(y, preds.shape[0], n_classes)
    return float(np.mean([_f1_one(preds, y, c) for c in range(n_classes)]))


def _f1_one(preds: np.ndarray, y: np.ndarray, c: int) -> float:
    tp = int(np.sum((preds == c) & (y == c)))
    fp = int(np.sum((preds == c) & (y != c)))
    fn = int(np.sum((preds != c) & (y == c)))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


@dataclass(frozen=True)
class ClassMetrics:
    label: int
    auroc: float
    auprc: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricReport:
    auroc_macro: float
    auprc_macro: float
    f1_macro: float
    per_class: Tuple[ClassMetrics, ...]
    n_samples: int

    def to_plain(self) -> dict:
        return {
            "auroc_macro": self.auroc_macro,
            "auprc_macro": self.auprc_macro,
            "f1_macro": self.f1_macro,
            "per_class": [vars(c).copy() for c in self.per_class],
            "n_samples": self.n_samples,
        }


def metric_report(scores, y) -> MetricReport:
    """All three headline metrics plus per-class breakdowns in one pass."""
    s = _scores_matrix(scores)
    y = _checked_labels(y, s.shape[0], s.shape[1])
    preds = np.argmax(s, axis=1)
    per_class = tuple(
        ClassMetrics(
            label=c,
            auroc=_binary_auroc(y == c, s[:, c]),
            auprc=_binary_auprc(y == c, s[:, c]),
            f1=_f1_one(preds, y, c),
            support=int(np.sum(y == c)),
        )
        for c in range(s.shape[1])
    )
    return MetricReport(
        auroc_macro=float(np.mean([c.auroc for c in per_class])),
        auprc_macro=float(np.mean([c.auprc for c in per_class])),
        f1_macro=float(np.mean([c.f1 for c in per_class])),
        per_class=per_class,
        n_samples=int(s.shape[0]),
    )


# ---------------------------------------------------------------------------
# paired t-test with an internal Student-t CDF

_BETACF_MAX_ITER = 300
_BETACF_EPS = 1e-14
_BETACF_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_FPMIN:
        d = _BETACF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise NumericsError("incomplete beta continued fraction did not converge")


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for T ~ Student-t(df), via I_x(df/2, 1/2)."""
    return _reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    mean_difference: float
    t_statistic: float
    p_value: float
    n_pairs: int

    def to_plain(self) -> dict:
        return vars(self).copy()


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on matched samples.

    t = mean(d) / (sd(d)/sqrt(n)) with sample sd (n-1 denominator); zero
    variance of the differences makes t undefined and raises.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired samples must be equal-length 1-D, got "
                         f"{a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ContractError(f"paired t-test needs n >= 2 pairs, got {n}")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError(
            "differences have zero variance; t statistic undefined")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return TTestResult(mean_difference=float(d.mean()), t_statistic=t,
                       p_value=_student_t_two_sided_p(t, n - 1), n_pairs=n)


def pairwise_ttests(values_by_key: Dict[str, Sequence[float]]
                    ) -> List[Tuple[str, str, TTestResult]]:
    """Paired t-tests for every unordered pair of keys, in input order.

    Requires the per-key value lists to be aligned on a shared seed set.
    """
    keys = list(values_by_key)
    out = []
    for i, ka in enumerate(keys):
        for kb in keys[i + 1:]:
            out.append((ka, kb, paired_ttest(values_by_key[ka],
                                             values_by_key[kb])))
    return out


# ---------------------------------------------------------------------------
# alternative contrastive objectives (baselines for the decoupling losses)

def infonce_loss(z_a: Tensor, z_b: Tensor, tau: float) -> Tensor:
    """Symmetric in-batch InfoNCE on cosine similarities.

    Positives sit on the diagonal and stay in the denominator, unlike the
    shared-alignment loss, so the value is non-negative.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    n = z_a.data.shape[0]
    sims = pairwise_cosine(z_a, z_b, "z_a", "z_b") * (1.0 / tau)
    eye = np.eye(n)
    diag = (sims * eye).sum(axis=1)
    den_ab = T.log(T.exp(sims).sum(axis=1))
    den_ba = T.log(T.exp(sims.transpose()).sum(axis=1))
    return ((den_ab - diag) + (den_ba - diag)).mean() * 0.5


def triplet_loss(z_a: Tensor, z_b: Tensor, margin: float = TRIPLET_MARGIN) -> Tensor:
    """Hardest-negative triplet loss over cosine similarities.

    Anchor i pairs with z_b[i]; the hardest in-batch negative is the
    highest-similarity non-matching z_b row. The hardest-negative choice
    is treated as a constant index, so gradients flow only through the
    selected similarity (the standard subgradient).
    """
    n = z_a.data.shape[0]
    if n == 1:
        return Tensor(0.0)  # no negative candidates to push away
    sims = pairwise_cosine(z_a, z_b, "z_a", "z_b")
    masked = sims.data.copy()
    np.fill_diagonal(masked, -np.inf)
    hardest_idx = np.argmax(masked, axis=1)
    pick = np.zeros((n, n))
    pick[np.arange(n), hardest_idx] = 1.0
    hardest = (sims * pick).sum(axis=1)
    pos = (sims * np.eye(n)).sum(axis=1)
    return T.relu(hardest - pos + margin).mean()


def supervised_clip_loss(z_a: Tensor, z_b: Tensor, labels: np.ndarray,
                         cfg: DecouplingConfig) -> Tensor:
    """Label-supervised contrastive loss applied to an undecoupled pair:
    the regularization objective with z_b standing in for the specific
    tabular embedding."""
    triple = EmbeddingTriple(z_s=z_a, z_t_sh=z_b, z_t_sp=z_b)
    return regularization_loss(triple, labels, cfg)


def alternative_loss(kind: str, z_a: Tensor, z_b: Tensor,
                     labels: np.ndarray, cfg: DecouplingConfig) -> Tensor:
    if kind == "infonce":
        return infonce_loss(z_a, z_b, cfg.tau)
    if kind == "triplet":
        return triplet_loss(z_a, z_b)
    if kind == "supervised_clip":
        return supervised_clip_loss(z_a, z_b, labels, cfg)
    raise ConfigError(f"unknown alternative loss {kind!r}; "
                      f"valid: infonce, triplet, supervised_clip")


# ---------------------------------------------------------------------------
# embedding export and latent-space separation

def collect_triple(model, ds: Dataset, batch_size: int = 256
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward the dataset in eval mode and stack the decoupled embeddings
    as plain (n, d_z) arrays: (z_s, z_t_sh, z_t_sp)."""
    if not model.has_triple:
        raise ContractError(
            f"variant {model.variant!r} does not produce an embedding triple")
    parts = ([], [], [])
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            _, triple = model(ds.x_num[idx], ds.x_cat[idx], ds.series[idx],
                              rng=None)
            for buf, t in zip(parts, (triple.z_s, triple.z_t_sh, triple.z_t_sp)):
                buf.append(t.data.copy())
    return tuple(np.concatenate(b, axis=0) for b in parts)


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("zero-norm embedding row; cosine undefined")
    return np.einsum("ij,ij->i", a, b) / (na * nb)


def separation_statistic(z_s: np.ndarray, z_t_sh: np.ndarray,
                         z_t_sp: np.ndarray) -> float:
    """mean cos(z_s, z_t_sh) - mean cos(z_s, z_t_sp): positive when the
    shared tabular embedding sits closer to the series embedding than the
    specific one does."""
    return float(_row_cosines(z_s, z_t_sh).mean()
                 - _row_cosines(z_s, z_t_sp).mean())


_MODALITY_TAGS = ("ts", "tab_shared", "tab_specific")


def export_embeddings(model, ds: Dataset, path: str,
                      batch_size: int = 256) -> None:
    """Write one CSV row per (sample, modality): sample_id, label, modality
    tag, then the d_z vector at 17 significant digits (lossless for
    64-bit floats)."""
    z_s, z_sh, z_sp = collect_triple(model, ds, batch_size)
    d_z = z_s.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label", "modality"]
                        + [f"z{j}" for j in range(d_z)])
        for tag, mat in zip(_MODALITY_TAGS, (z_s, z_sh, z_sp)):
            for i in range(len(ds)):
                writer.writerow([ds.sample_ids[i], int(ds.y[i]), tag]
                                + [f"{v:.17g}" for v in mat[i]])


def read_embeddings(path: str) -> Tuple[np.ndarray, np.ndarray,
                                        Dict[str, np.ndarray]]:
    """Inverse of export_embeddings: (sample_ids, labels, tag -> matrix),
    sample order preserved within each modality block."""
    ids: List[str] = []
    labels: List[int] = []
    rows: Dict[str, List[List[float]]] = {t: [] for t in _MODALITY_TAGS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["sample_id", "label", "modality"]:
            raise ContractError(f"{path}: not an embedding export")
        for row in reader:
            if row[2] not in rows:
                raise ContractError(f"{path}: unknown modality tag {row[2]!r}")
            if row[2] == _MODALITY_TAGS[0]:
                ids.append(row[0])
                labels.append(int(row[1]))
            rows[row[2]].append([float(v) for v in row[3:]])
    return (np.array(ids), np.array(labels, dtype=np.int64),
            {t: np.array(m, dtype=np.float64) for t, m in rows.items()})


# ---------------------------------------------------------------------------
# grid runner: the engine behind ablations and sweeps

@dataclass(frozen=True)
class RunSpec:
    """One independent training run; key is a free-form grid label."""
    key: str
    model_cfg: ModelConfig
    train_cfg: TrainConfig


@dataclass(frozen=True)
class RunOutcome:
    key: str
    variant: str
    seed: int
    test_metrics: Optional[MetricReport]
    val_separation: Optional[float]
    best_val_loss: Optional[float]
    error: Optional[str]

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def test_auroc(self) -> Optional[float]:
        return self.test_metrics.auroc_macro if self.test_metrics else None

    def to_plain(self) -> dict:
        return {
            "key": self.key,
            "variant": self.variant,
            "seed": self.seed,
            "test_metrics": self.test_metrics.to_plain() if self.test_metrics else None,
            "val_separation": self.val_separation,
            "best_val_loss": self.best_val_loss,
            "error": self.error,
        }


def _execute_one(spec: RunSpec, train_ds: Dataset, val_ds: Dataset,
                 test_ds: Dataset, schema: TabularSchema) -> RunOutcome:
    try:
        result = train(train_ds, val_ds, spec.model_cfg, spec.train_cfg, schema)
        probs = predict_proba_dataset(result.model, test_ds)
        report = metric_report(probs, test_ds.y)
        sep = None
        if result.model.has_triple:
            sep = separation_statistic(*collect_triple(result.model, val_ds))
        return RunOutcome(key=spec.key, variant=spec.train_cfg.model_variant,
                          seed=spec.train_cfg.seed, test_metrics=report,
                          val_separation=sep,
                          best_val_loss=result.best_val_loss, error=None)
    except DaftedError as exc:
        return RunOutcome(key=spec.key, variant=spec.train_cfg.model_variant,
                          seed=spec.train_cfg.seed, test_metrics=None,
                          val_separation=None, best_val_loss=None,
                          error=f"{type(exc).__name__}: {exc}")


# worker-process state, installed once per process by the pool initializer
_POOL_DATA: dict = {}


def _pool_init(train_ds, val_ds, test_ds, schema) -> None:
    _POOL_DATA["bundle"] = (train_ds, val_ds, test_ds, schema)


def _pool_task(spec: RunSpec) -> RunOutcome:
    return _execute_one(spec, *_POOL_DATA["bundle"])


def execute_runs(specs: Sequence[RunSpec], train_ds: Dataset, val_ds: Dataset,
                 test_ds: Dataset, schema: TabularSchema,
                 jobs: int = 1) -> List[RunOutcome]:
    """Run every spec and return outcomes in spec order.

    jobs > 1 uses worker processes (each run owns fully isolated state;
    the tensor module keeps process-global mode flags, so threads are not
    an option). Failures come back as outcomes, never exceptions.
    """
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    if jobs == 1 or len(specs) <= 1:
        return [_execute_one(s, train_ds, val_ds, test_ds, schema)
                for s in specs]
    with ProcessPoolExecutor(max_workers=min(jobs, len(specs)),
                             initializer=_pool_init,
                             initargs=(train_ds, val_ds, test_ds, schema)) as ex:
        return list(ex.map(_pool_task, specs))


def variant_grid_specs(variants: Sequence[str], seeds: Sequence[int],
                       model_cfg: ModelConfig,
                       train_cfg: TrainConfig) -> List[RunSpec]:
    """Variant-major spec grid sharing one seed set, so per-seed metric
    lists are aligned for paired tests."""
    return [
        RunSpec(key=f"{v}/seed{s}", model_cfg=model_cfg,
                train_cfg=replace(train_cfg, model_variant=v, seed=s))
        for v in variants for s in seeds
    ]


# ---------------------------------------------------------------------------
# single-parameter sweeps

SWEEPABLE_PARAMS = ("lambda", "tau", "w_shsd", "w_reg", "batch_size",
                    "learning_rate")


def apply_sweep_value(model_cfg: ModelConfig, train_cfg: TrainConfig,
                      param: str, value: float
                      ) -> Tuple[ModelConfig, TrainConfig]:
    if param == "lambda":
        return model_cfg, replace(train_cfg, lambda_decoupling=float(value))
    if param == "batch_size":
        return model_cfg, replace(train_cfg, batch_size=int(value))
    if param == "learning_rate":
        return model_cfg, replace(train_cfg, learning_rate=float(value))
    if param in ("tau", "w_shsd", "w_reg"):
        dec = replace(model_cfg.decoupling, **{param: float(value)})
        return replace(model_cfg, decoupling=dec), train_cfg
    raise ConfigError(f"unknown sweep parameter {param!r}; "
                      f"valid: {', '.join(SWEEPABLE_PARAMS)}")


@dataclass(frozen=True)
class SweepCell:
    seed: int
    auroc: Optional[float]
    error: Optional[str]


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: float
    cells: Tuple[SweepCell, ...]

    @property
    def ok_values(self) -> List[float]:
        return [c.auroc for c in self.cells if c.auroc is not None]

    @property
    def mean_auroc(self) -> Optional[float]:
        vals = self.ok_values
        return float(np.mean(vals)) if vals else None

    @property
    def std_auroc(self) -> Optional[float]:
        vals = self.ok_values
        if not vals:
            return None
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    @property
    def n_failed(self) -> int:
        return sum(1 for c in self.cells if c.error is not None)


def run_sweep(param: str, values: Sequence[float], seeds: Sequence[int],
              train_ds: Dataset, val_ds: Dataset, test_ds: Dataset,
              schema: TabularSchema, model_cfg: ModelConfig,
              train_cfg: TrainConfig, jobs: int = 1) -> List[SweepRow]:
    """One row per grid value; every value is trained on the same seed set
    so rows are comparable pairwise.

    A grid value that yields an invalid config becomes a fully-failed row
    instead of aborting the sweep; an unknown parameter name is still fatal
    (every point would fail identically).
    """
    if param not in SWEEPABLE_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; "
                          f"valid: {', '.join(SWEEPABLE_PARAMS)}")
    if not values:
        raise ConfigError("sweep needs a non-empty value list")
    if not seeds:
        raise ConfigError("sweep needs a non-empty seed list")
    plan: List[Tuple[float, Optional[List[RunSpec]], Optional[str]]] = []
    specs: List[RunSpec] = []
    for v in values:
        try:
            m_cfg, t_cfg = apply_sweep_value(model_cfg, train_cfg, param, v)
            point = [RunSpec(key=f"{param}={v}/seed{s}", model_cfg=m_cfg,
                             train_cfg=replace(t_cfg, seed=s)) for s in seeds]
        except DaftedError as exc:
            plan.append((v, None, f"{type(exc).__name__}: {exc}"))
            continue
        plan.append((v, point, None))
        specs.extend(point)
    outcomes = iter(execute_runs(specs, train_ds, val_ds, test_ds, schema,
                                 jobs=jobs))
    rows = []
    for v, point, err in plan:
        if point is None:
            cells = tuple(SweepCell(seed=s, auroc=None, error=err)
                          for s in seeds)
        else:
            cells = tuple(SweepCell(seed=o.seed, auroc=o.test_auroc,
                                    error=o.error)
                          for o in (next(outcomes) for _ in point))
        rows.append(SweepRow(param=param, value=float(v), cells=cells))
    return rows


def write_sweep_csv(path: str, rows: Sequence[SweepRow]) -> None:
    """Wide grid CSV: one row per value, one auroc column per seed (blank
    for failed runs), plus mean/std and an error summary column."""
    if not rows:
        raise ConfigError("no sweep rows to write")
    seeds = [c.seed for c in rows[0].cells]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "n_seeds", "n_failed",
                         "mean_auroc", "std_auroc"]
                        + [f"auroc_seed{s}" for s in seeds]
                        + ["errors"])
        for r in rows:
            fmt = lambda x: "" if x is None else f"{x:.17g}"
            errors = "; ".join(f"seed{c.seed}: {c.error}"
                               for c in r.cells if c.error)
            writer.writerow([r.param, f"{r.value:.17g}", len(r.cells),
                             r.n_failed, fmt(r.mean_auroc), fmt(r.std_auroc)]
                            + [fmt(c.auroc) for c in r.cells] + [errors])


def read_sweep_csv(path: str) -> List[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["param", "value"]:
            raise ContractError(f"{path}: not a sweep grid")
        seed_cols = [(i, int(name[len("auroc_seed"):]))
                     for i, name in enumerate(header)
                     if name.startswith("auroc_seed")]
        rows = []
        for raw in reader:
            cells = tuple(
                SweepCell(seed=s, auroc=float(raw[i]) if raw[i] else None,
                          error=None if raw[i] else "failed")
                for i, s in seed_cols)
            rows.append(SweepRow(param=raw[0], value=float(raw[1]),
                                 cells=cells))
    return rows
