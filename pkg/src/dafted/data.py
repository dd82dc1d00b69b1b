"""Synthetic multimodal data with controllable shared/specific structure,
CSV ingestion, stratified splitting, and train-statistics normalization.

The generator draws, per sample, a class label y, a shared latent u and a
specific latent v. Class information is split between them by label_mix:
v carries it with weight label_mix, u with weight 1 - label_mix. Numeric
tabular features are a fixed linear map of [u; v] plus observation noise;
categorical features are quantized linear scores of v; each time series is
a smooth low-order Fourier curve whose coefficients depend on u only. The
time series therefore see exactly the shared latent, never the specific
one, which makes the shared/specific asymmetry true by construction.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .encoders import TabularSchema
from .errors import ConfigError, SchemaError, StratificationError

__all__ = [
    "SynthConfig",
    "SplitSpec",
    "MultimodalSample",
    "Dataset",
    "Normalizer",
    "generate",
    "generate_with_latents",
    "default_schema",
    "series_names_for",
    "split",
    "split_indices",
    "save_csv",
    "load_csv",
]

# standard normal tertile boundary, used to quantize categorical scores
_TERTILE = 0.43072729929545756


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 900
    n_classes: int = 3
    n_shared_factors: int = 4
    n_specific_factors: int = 4
    n_numeric_features: int = 10
    n_categorical_features: int = 3
    n_series: int = 14
    series_length: int = 32
    noise_sigma: float = 3.0
    label_mix: float = 0.85
    class_sep: float = 3.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_samples, self.n_classes, self.n_shared_factors,
                  self.n_specific_factors, self.n_numeric_features, self.n_series,
                  self.series_length)
        if any(c < 1 for c in counts):
            raise ConfigError("all synthetic counts must be positive")
        if self.n_categorical_features < 0:
            raise ConfigError("n_categorical_features must be >= 0")
        if not 0.0 <= self.label_mix <= 1.0:
            raise ConfigError(f"label_mix must lie in [0, 1], got {self.label_mix}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class SplitSpec:
    """Fractions default to the 171/20/48-of-239 layout."""

    train_fraction: float = 171.0 / 239.0
    val_fraction: float = 20.0 / 239.0
    test_fraction: float = 48.0 / 239.0
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {total}")
        if min(self.train_fraction, self.val_fraction, self.test_fraction) < 0:
            raise ConfigError("split fractions must be non-negative")


@dataclass
class MultimodalSample:
    sample_id: int
    tabular: Dict[str, float]
    series: np.ndarray  # (n_series, T)
    label: int


def default_schema(cfg: SynthConfig) -> TabularSchema:
    return TabularSchema(
        numeric_features=tuple(f"num{j:02d}" for j in range(cfg.n_numeric_features)),
        categorical_features=tuple((f"cat{j}", 3) for j in range(cfg.n_categorical_features)),
    )


def series_names_for(n_series: int) -> Tuple[str, ...]:
    return tuple(f"ts{k:02d}" for k in range(n_series))


def _structure(cfg: SynthConfig):
    """Dataset-level fixed randomness: class means, mixing maps, bases.

    Seeded independently of the per-sample streams so datasets of different
    sizes share structure for a given seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    mu_u = rng.standard_normal((cfg.n_classes, cfg.n_shared_factors))
    mu_v = rng.standard_normal((cfg.n_classes, cfg.n_specific_factors))
    n_latent = cfg.n_shared_factors + cfg.n_specific_factors
    mix = rng.standard_normal((cfg.n_numeric_features, n_latent)) / math.sqrt(n_latent)
    cat_w = rng.standard_normal((cfg.n_categorical_features, cfg.n_specific_factors))
    if cfg.n_categorical_features:
        cat_w /= np.linalg.norm(cat_w, axis=1, keepdims=True)
    n_basis = 5
    t_axis = np.arange(cfg.series_length) / cfg.series_length
    basis = np.stack(
        [np.ones(cfg.series_length)]
        + [f(2.0 * math.pi * (order + 1) * t_axis)
           for order in range(2) for f in (np.sin, np.cos)]
    )
    coeff_maps = rng.standard_normal((cfg.n_series, n_basis, cfg.n_shared_factors)) / math.sqrt(
        cfg.n_shared_factors
    )
    return mu_u, mu_v, mix, cat_w, basis, coeff_maps


def generate_with_latents(cfg: SynthConfig):
    """Generate samples plus the latents and series coefficients that made
    them (the latents support structural checks; training code never sees
    them)."""
    mu_u, mu_v, mix, cat_w, basis, coeff_maps = _structure(cfg)
    a_u = cfg.class_sep * (1.0 - cfg.label_mix)
    a_v = cfg.class_sep * cfg.label_mix
    schema = default_schema(cfg)

    # categorical quantization thresholds from the theoretical score spread
    cat_thresholds = []
    for j in range(cfg.n_categorical_features):
        m = mu_v @ cat_w[j]
        center = a_v * m.mean()
        spread = math.sqrt(a_v ** 2 * np.mean((m - m.mean()) ** 2) + 1.0 + cfg.noise_sigma ** 2)
        cat_thresholds.append((center - _TERTILE * spread, center + _TERTILE * spread))

    samples: List[MultimodalSample] = []
    us = np.zeros((cfg.n_samples, cfg.n_shared_factors))
    vs = np.zeros((cfg.n_samples, cfg.n_specific_factors))
    coeffs = np.zeros((cfg.n_samples, cfg.n_series, basis.shape[0]))
    for i in range(cfg.n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i + 1]))
        y = int(rng.integers(cfg.n_classes))
        u = a_u * mu_u[y] + rng.standard_normal(cfg.n_shared_factors)
        v = a_v * mu_v[y] + rng.standard_normal(cfg.n_specific_factors)
        numeric = mix @ np.concatenate([u, v]) + cfg.noise_sigma * rng.standard_normal(
            cfg.n_numeric_features
        )
        tabular = {name: float(numeric[j]) for j, name in enumerate(schema.numeric_features)}
        for j, (name, _) in enumerate(schema.categorical_features):
            score = float(cat_w[j] @ v + cfg.noise_sigma * rng.standard_normal())
            lo, hi = cat_thresholds[j]
            tabular[name] = 0 if score < lo else (1 if score < hi else 2)
        c = coeff_maps @ u  # (n_series, n_basis)
        series = c @ basis + cfg.noise_sigma * rng.standard_normal(
            (cfg.n_series, cfg.series_length)
        )
        samples.append(MultimodalSample(sample_id=i, tabular=tabular, series=series, label=y))
        us[i], vs[i], coeffs[i] = u, v, c
    return samples, {"u": us, "v": vs, "coeffs": coeffs}


def generate(cfg: SynthConfig) -> List[MultimodalSample]:
    return generate_with_latents(cfg)[0]


# ---------------------------------------------------------------------------
# stratified splitting


def _total_targets(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of n into len(fractions) buckets."""
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    leftover = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda s: (raw[s] - counts[s], -s), reverse=True)
    for s in order[:leftover]:
        counts[s] += 1
    return counts


def split_indices(labels: Sequence[int], spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays (train, val, test), disjoint and covering the input."""
    y = np.asarray(labels)
    n = len(y)
    fractions = (spec.train_fraction, spec.val_fraction, spec.test_fraction)
    rng = np.random.default_rng(spec.seed)

    if not spec.stratified:
        perm = rng.permutation(n)
        t_tr, t_va, _ = _total_targets(n, fractions)
        return (np.sort(perm[:t_tr]), np.sort(perm[t_tr:t_tr + t_va]), np.sort(perm[t_tr + t_va:]))

    classes = sorted(set(y.tolist()))
    for c in classes:
        if int((y == c).sum()) < 3:
            raise StratificationError(
                f"class {c} has {(y == c).sum()} members; stratified split needs >= 3"
            )
    totals = _total_targets(n, fractions)
    # round each class independently (largest remainder: every cell is the
    # floor or ceiling of its exact target, so per-class deviation <= 1),
    # then repair split totals by moving single units between splits,
    # only via moves that keep each cell at floor or ceiling
    counts: Dict[int, List[int]] = {}
    floors: Dict[int, List[int]] = {}
    for c in classes:
        n_c = int((y == c).sum())
        counts[c] = _total_targets(n_c, fractions)
        floors[c] = [int(math.floor(n_c * f)) for f in fractions]

    def col_delta(s: int) -> int:
        return sum(counts[c][s] for c in classes) - totals[s]

    def movers(src: int, dst: int):
        return [c for c in classes
                if counts[c][src] > floors[c][src] and counts[c][dst] == floors[c][dst]]

    for _ in range(2 * n):  # bounded repair loop; each pass fixes one unit
        overs = [s for s in range(3) if col_delta(s) > 0]
        unders = [s for s in range(3) if col_delta(s) < 0]
        if not overs:
            break
        done = False
        for src in overs:
            for dst in unders:
                direct = movers(src, dst)
                if direct:
                    counts[direct[0]][src] -= 1
                    counts[direct[0]][dst] += 1
                    done = True
                    break
                for mid in range(3):
                    if mid in (src, dst):
                        continue
                    first, second = movers(src, mid), movers(mid, dst)
                    if first and second:
                        counts[first[0]][src] -= 1
                        counts[first[0]][mid] += 1
                        counts[second[0]][mid] -= 1
                        counts[second[0]][dst] += 1
                        done = True
                        break
                if done:
                    break
            if done:
                break
        if not done:
            break

    out: List[List[int]] = [[], [], []]
    for c in classes:
        idx = np.nonzero(y == c)[0]
        idx = idx[rng.permutation(len(idx))]
        pos = 0
        for s in range(3):
            out[s].extend(idx[pos:pos + counts[c][s]].tolist())
            pos += counts[c][s]
    return tuple(np.array(sorted(part), dtype=int) for part in out)


def split(samples: Sequence[MultimodalSample], spec: SplitSpec):
    """(train, val, test) lists of samples."""
    tr, va, te = split_indices([s.label for s in samples], spec)
    pick = lambda idx: [samples[i] for i in idx]
    return pick(tr), pick(va), pick(te)


# ---------------------------------------------------------------------------
# columnar batches and normalization


class Dataset:
    """Columnar view of a sample list: everything the models consume."""

    def __init__(self, x_num: np.ndarray, x_cat: np.ndarray, series: np.ndarray,
                 y: np.ndarray, sample_ids: np.ndarray):
        self.x_num = x_num
        self.x_cat = x_cat
        self.series = series
        self.y = y
        self.sample_ids = sample_ids

    @classmethod
    def from_samples(cls, samples: Sequence[MultimodalSample], schema: TabularSchema) -> "Dataset":
        n = len(samples)
        n_num = len(schema.numeric_features)
        n_cat = len(schema.categorical_features)
        if n == 0:
            k, t = 0, 0
        else:
            k, t = samples[0].series.shape
        x_num = np.zeros((n, n_num))
        x_cat = np.zeros((n, n_cat), dtype=np.intp)
        series = np.zeros((n, k, t))
        y = np.zeros(n, dtype=np.intp)
        ids = np.zeros(n, dtype=np.intp)
        for i, s in enumerate(samples):
            missing = [f for f in schema.feature_names if f not in s.tabular]
            if missing:
                raise SchemaError(f"sample {s.sample_id} missing features: {missing}")
            x_num[i] = [s.tabular[f] for f in schema.numeric_features]
            x_cat[i] = [int(s.tabular[f]) for f, _ in schema.categorical_features]
            series[i] = s.series
            y[i] = s.label
            ids[i] = s.sample_id
        return cls(x_num, x_cat, series, y, ids)

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Dataset":
        return Dataset(self.x_num[idx], self.x_cat[idx], self.series[idx],
                       self.y[idx], self.sample_ids[idx])

    @property
    def n_classes_present(self) -> int:
        return len(set(self.y.tolist()))


class Normalizer:
    """Z-scores numeric features and time-series channels with statistics
    from the training split only."""

    def __init__(self, num_mean, num_std, ts_mean, ts_std):
        self.num_mean = np.asarray(num_mean, dtype=float)
        self.num_std = np.asarray(num_std, dtype=float)
        self.ts_mean = np.asarray(ts_mean, dtype=float)
        self.ts_std = np.asarray(ts_std, dtype=float)

    @classmethod
    def fit(cls, train: Dataset) -> "Normalizer":
        num_mean = train.x_num.mean(axis=0) if len(train) else np.zeros(train.x_num.shape[1])
        num_std = train.x_num.std(axis=0) if len(train) else np.ones(train.x_num.shape[1])
        num_std = np.where(num_std > 0, num_std, 1.0)
        # per-channel statistics pooled over samples and time
        ts_mean = train.series.mean(axis=(0, 2)) if len(train) else np.zeros(train.series.shape[1])
        ts_std = train.series.std(axis=(0, 2)) if len(train) else np.ones(train.series.shape[1])
        ts_std = np.where(ts_std > 0, ts_std, 1.0)
        return cls(num_mean, num_std, ts_mean, ts_std)

    def transform(self, ds: Dataset) -> Dataset:
        x_num = (ds.x_num - self.num_mean) / self.num_std
        series = (ds.series - self.ts_mean[:, None]) / self.ts_std[:, None]
        return Dataset(x_num, ds.x_cat, series, ds.y, ds.sample_ids)

    def state(self) -> Dict[str, np.ndarray]:
        return {
            "norm.num_mean": self.num_mean.copy(),
            "norm.num_std": self.num_std.copy(),
            "norm.ts_mean": self.ts_mean.copy(),
            "norm.ts_std": self.ts_std.copy(),
        }

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "Normalizer":
        return cls(state["norm.num_mean"], state["norm.num_std"],
                   state["norm.ts_mean"], state["norm.ts_std"])


# ---------------------------------------------------------------------------
# CSV round trip


def _format_val(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def save_csv(samples: Sequence[MultimodalSample], schema: TabularSchema,
             tabular_path: str, series_path: str,
             series_names: Optional[Sequence[str]] = None) -> None:
    if samples and series_names is None:
        series_names = series_names_for(samples[0].series.shape[0])
    with open(tabular_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(schema.feature_names) + ["label"])
        for s in samples:
            row = [_format_val(s.tabular[f]) for f in schema.numeric_features]
            row += [str(int(s.tabular[f])) for f, _ in schema.categorical_features]
            row.append(str(int(s.label)))
            writer.writerow(row)
    with open(series_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "series_name", "t_index", "value"])
        for s in samples:
            for k, name in enumerate(series_names or ()):
                for t in range(s.series.shape[1]):
                    writer.writerow([str(int(s.sample_id)), name, str(t), repr(float(s.series[k, t]))])


def load_csv(tabular_path: str, series_path: str, schema: TabularSchema) -> List[MultimodalSample]:
    """Parse the two-file sample format; sample ids are tabular row indices."""
    with open(tabular_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        missing = [f for f in list(schema.feature_names) + ["label"] if f not in header]
        if missing:
            raise SchemaError(f"tabular csv missing columns: {missing}")
        col = {name: header.index(name) for name in header}
        tab_rows = []
        for r, row in enumerate(reader):
            rec: Dict[str, float] = {}
            for f in schema.numeric_features:
                cell = row[col[f]]
                try:
                    rec[f] = float(cell)
                except ValueError:
                    raise ValueError(f"unparseable numeric cell {cell!r} at row {r}, column {f!r}")
            for f, card in schema.categorical_features:
                cell = row[col[f]]
                try:
                    val = int(cell)
                except ValueError:
                    raise ValueError(f"unparseable category {cell!r} at row {r}, column {f!r}")
                if not 0 <= val < card:
                    raise ValueError(f"category {val} out of range at row {r}, column {f!r}")
                rec[f] = val
            cell = row[col["label"]]
            try:
                label = int(cell)
            except ValueError:
                raise ValueError(f"unparseable label {cell!r} at row {r}")
            tab_rows.append((rec, label))

    per_sample: Dict[int, Dict[str, Dict[int, float]]] = {}
    names_seen = set()
    with open(series_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            header = None
        if header is not None:
            expected = ["sample_id", "series_name", "t_index", "value"]
            missing = [c for c in expected if c not in header]
            if missing:
                raise SchemaError(f"series csv missing columns: {missing}")
            col = {name: header.index(name) for name in header}
            for r, row in enumerate(reader):
                try:
                    sid = int(row[col["sample_id"]])
                    t = int(row[col["t_index"]])
                    val = float(row[col["value"]])
                except ValueError:
                    raise ValueError(f"unparseable series cell at row {r}")
                name = row[col["series_name"]]
                names_seen.add(name)
                per_sample.setdefault(sid, {}).setdefault(name, {})[t] = val

    ordered_names = sorted(names_seen)
    samples = []
    for sid, (rec, label) in enumerate(tab_rows):
        traces = per_sample.get(sid, {})
        if ordered_names:
            t_len = max(max(tr) for tr in traces.values()) + 1 if traces else 0
            series = np.zeros((len(ordered_names), t_len))
            for k, name in enumerate(ordered_names):
                trace = traces.get(name)
                if trace is None or len(trace) != t_len:
                    raise SchemaError(f"sample {sid}: series {name!r} missing or ragged")
                for t, val in trace.items():
                    series[k, t] = val
        else:
            series = np.zeros((0, 0))
        samples.append(MultimodalSample(sample_id=sid, tabular=rec, series=series, label=label))
    return samples
