"""Command-line entry point.

One declarative JSON config drives every subcommand; `--set section.key=value`
applies dotted overrides before validation, and each command echoes the
fully-resolved config into its JSON output so any run can be reproduced
bit-for-bit from its own report.

Exit codes: 0 success, 2 config or usage problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import from_plain, to_plain
from .data import (Dataset, Normalizer, SplitSpec, SynthConfig, TabularSchema,
                   default_schema, generate, load_csv, save_csv,
                   series_names_for, split)
from .errors import ConfigError, DaftedError, NumericsError, TrainingAbort
from .evaluation import (execute_runs, export_embeddings, metric_report,
                         paired_ttest, run_sweep, variant_grid_specs,
                         write_sweep_csv)
from .models import ModelConfig
from .training import (TrainConfig, load_run_checkpoint, predict_proba_dataset,
                       save_run_checkpoint, train)

__all__ = [
    "RunConfig", "DataConfig", "CsvSource", "EvalSection", "SweepSection",
    "resolve_config", "apply_overrides", "load_bundle", "main",
    "DEFAULT_SWEEP_VALUES", "ABLATION_VARIANTS",
]

DEFAULT_SWEEP_VALUES: Dict[str, Tuple[float, ...]] = {
    "lambda": (0.0, 0.25, 0.5, 1.0, 2.0, 4.0),
    "tau": (0.01, 0.05, 0.1, 0.5, 1.0),
}
ABLATION_VARIANTS = ("dafted", "no_decoupling", "no_asym_fusion", "neither")

# ablation table annotations: does the variant train the decoupling losses,
# and does it fuse through asymmetric cross-attention?
_HAS_DECOUPLING = frozenset({"dafted", "no_asym_fusion"})
_HAS_ASYM_FUSION = frozenset({"dafted", "no_decoupling"})


# ---------------------------------------------------------------------------
# config file schema

@dataclass(frozen=True)
class CsvSource:
    tabular_path: str
    series_path: str
    schema: TabularSchema

    def __post_init__(self):
        if not self.tabular_path or not self.series_path:
            raise ConfigError("csv source needs tabular_path and series_path")


@dataclass(frozen=True)
class DataConfig:
    synthetic: Optional[SynthConfig] = None
    csv: Optional[CsvSource] = None
    split: SplitSpec = field(default_factory=SplitSpec)
    normalize: bool = True

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ConfigError(
                "data section needs exactly one source: 'synthetic' or 'csv'")


@dataclass(frozen=True)
class SweepSection:
    param: str = "lambda"
    values: Tuple[float, ...] = ()  # empty: use the per-param default grid
    seeds: Tuple[int, ...] = (0, 1, 2)
    epochs: Optional[int] = None    # override train.epochs for sweep runs

    def __post_init__(self):
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("sweep epochs must be >= 0")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")


@dataclass(frozen=True)
class EvalSection:
    batch_size: int = 256
    ablate_variants: Tuple[str, ...] = ABLATION_VARIANTS
    sweep: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("eval batch_size must be >= 1")
        if not self.ablate_variants:
            raise ConfigError("ablate_variants must not be empty")


def _default_data() -> DataConfig:
    return DataConfig(synthetic=SynthConfig())


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=_default_data)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs"


def apply_overrides(plain: dict, sets: Sequence[str]) -> dict:
    """Apply dotted ``section.key=value`` overrides to the raw config dict.

    Values parse as JSON when possible (numbers, bools, lists), else as
    strings. Unknown key names survive here and are rejected by validation.
    """
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set needs section.key=value, got {item!r}")
        path, raw = item.split("=", 1)
        keys = [k for k in path.split(".") if k]
        if not keys:
            raise ConfigError(f"--set needs a non-empty key path, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = plain
        for k in keys[:-1]:
            nxt = node.get(k)
            if not isinstance(nxt, dict):
                nxt = {}
                node[k] = nxt
            node = nxt
        node[keys[-1]] = value
    return plain


def resolve_config(path: str, sets: Sequence[str] = ()) -> RunConfig:
    """Load, override, and validate a run config file."""
    try:
        with open(path) as fh:
            plain = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(plain, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    apply_overrides(plain, sets)
    return from_plain(RunConfig, plain, where="config")


# ---------------------------------------------------------------------------
# shared plumbing

def load_bundle(dcfg: DataConfig, normalizer: Optional[Normalizer] = None):
    """Materialize (train, val, test, schema, normalizer) from a data config.

    A caller-provided normalizer (e.g. from a checkpoint) is applied as-is;
    otherwise one is fitted on the training split when normalization is on.
    """
    if dcfg.synthetic is not None:
        samples = generate(dcfg.synthetic)
        schema = default_schema(dcfg.synthetic)
    else:
        schema = dcfg.csv.schema
        samples = load_csv(dcfg.csv.tabular_path, dcfg.csv.series_path, schema)
    parts = split(samples, dcfg.split)
    tr, va, te = (Dataset.from_samples(p, schema) for p in parts)
    norm = normalizer
    if norm is None and dcfg.normalize:
        norm = Normalizer.fit(tr)
    if norm is not None:
        tr, va, te = norm.transform(tr), norm.transform(va), norm.transform(te)
    return tr, va, te, schema, norm


def _ensure_tree(out_dir: str) -> Dict[str, str]:
    paths = {name: os.path.join(out_dir, name)
             for name in ("checkpoints", "reports", "grids", "embeddings")}
    for p in paths.values():
        os.makedirs(p, exist_ok=True)
    return paths


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True))
        fh.write("\n")


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.17g}"


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate_data(args) -> int:
    cfg = resolve_config(args.config, args.set)
    if cfg.data.synthetic is None:
        raise ConfigError("generate-data needs a synthetic data section")
    out = args.out or os.path.join(cfg.output_dir, "data")
    os.makedirs(out, exist_ok=True)
    samples = generate(cfg.data.synthetic)
    schema = default_schema(cfg.data.synthetic)
    tab_path = os.path.join(out, "tabular.csv")
    ser_path = os.path.join(out, "series.csv")
    save_csv(samples, schema, tab_path, ser_path,
             series_names=series_names_for(cfg.data.synthetic.n_series))
    _write_json(os.path.join(out, "manifest.json"), {
        "config": to_plain(cfg),
        "seed": cfg.data.synthetic.seed,
        "n_samples": len(samples),
        "schema": to_plain(schema),
        "files": {"tabular": "tabular.csv", "series": "series.csv"},
    })
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    t_cfg = cfg.train
    if args.variant is not None:
        t_cfg = replace(t_cfg, model_variant=args.variant)
    if args.seed is not None:
        t_cfg = replace(t_cfg, seed=args.seed)
    cfg = replace(cfg, train=t_cfg)

    out = args.out or cfg.output_dir
    _ensure_tree(out)
    tr, va, te, schema, norm = load_bundle(cfg.data)
    result = train(tr, va, cfg.model, t_cfg, schema)
    probs = predict_proba_dataset(result.model, te, cfg.eval.batch_size)
    test_metrics = metric_report(probs, te.y)

    run_name = f"{t_cfg.model_variant}_seed{t_cfg.seed}"
    ckpt_rel = os.path.join("checkpoints", f"{run_name}.ckpt")
    save_run_checkpoint(os.path.join(out, ckpt_rel), result, cfg.model,
                        t_cfg, schema, normalizer=norm)
    emb_rel = None
    if result.model.has_triple:
        emb_rel = os.path.join("embeddings", f"{run_name}_val.csv")
        export_embeddings(result.model, va, os.path.join(out, emb_rel),
                          cfg.eval.batch_size)

    report_rel = os.path.join("reports", f"{run_name}.json")
    _write_json(os.path.join(out, report_rel), {
        "config": to_plain(cfg),
        "run": result.report,
        "test_metrics": test_metrics.to_plain(),
        "checkpoint": ckpt_rel,
        "embeddings": emb_rel,
    })
    print(f"{run_name}: best val loss {result.best_val_loss:.6f} "
          f"(epoch {result.best_epoch}), test macro AUC "
          f"{test_metrics.auroc_macro:.4f}")
    print(f"wrote {os.path.join(out, ckpt_rel)}")
    print(f"wrote {os.path.join(out, report_rel)}")
    return 0


def cmd_evaluate(args) -> int:
    model, norm, ckpt_config, meta = load_run_checkpoint(args.checkpoint)
    data_cfg_full = resolve_config(args.data, args.set)
    dcfg = data_cfg_full.data
    tr, va, te, _, _ = load_bundle(dcfg, normalizer=norm)
    ds = {"train": tr, "val": va, "test": te}[args.split]
    probs = predict_proba_dataset(model, ds, data_cfg_full.eval.batch_size)
    rep = metric_report(probs, ds.y)

    out = args.out or data_cfg_full.output_dir
    _ensure_tree(out)
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    report_rel = os.path.join("reports", f"evaluate_{args.split}_{stem}.json")
    _write_json(os.path.join(out, report_rel), {
        "split": args.split,
        "checkpoint": args.checkpoint,
        "checkpoint_meta": meta,
        "checkpoint_config": ckpt_config,
        "data_config": to_plain(dcfg),
        "metrics": rep.to_plain(),
    })
    print(f"{meta['variant']} on {args.split}: macro AUC "
          f"{rep.auroc_macro:.4f}, AUPRC {rep.auprc_macro:.4f}, "
          f"F1 {rep.f1_macro:.4f}")
    print(f"wrote {os.path.join(out, report_rel)}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, args.set)
    seeds = list(range(args.seeds))
    if not seeds:
        raise ConfigError("ablate needs --seeds >= 1")
    variants = list(cfg.eval.ablate_variants)
    out = args.out or cfg.output_dir
    _ensure_tree(out)

    tr, va, te, schema, _ = load_bundle(cfg.data)
    specs = variant_grid_specs(variants, seeds, cfg.model, cfg.train)
    outcomes = execute_runs(specs, tr, va, te, schema, jobs=args.jobs)

    by_variant: Dict[str, List[Optional[float]]] = {v: [] for v in variants}
    for o in outcomes:
        by_variant[o.variant].append(o.test_auroc)

    ttests = []
    for i, va_name in enumerate(variants):
        for vb_name in variants[i + 1:]:
            a_vals, b_vals = by_variant[va_name], by_variant[vb_name]
            entry = {"a": va_name, "b": vb_name}
            if None in a_vals or None in b_vals:
                entry["error"] = "failed runs break the pairing"
            else:
                try:
                    entry["result"] = paired_ttest(a_vals, b_vals).to_plain()
                except DaftedError as exc:
                    entry["error"] = f"{type(exc).__name__}: {exc}"
            ttests.append(entry)

    table_rel = os.path.join("grids", "ablation.csv")
    with open(os.path.join(out, table_rel), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "decoupling", "asym_fusion"]
                        + [f"auroc_seed{s}" for s in seeds]
                        + ["mean_auroc", "std_auroc", "n_failed"])
        for v in variants:
            vals = by_variant[v]
            ok = [x for x in vals if x is not None]
            mean = float(np.mean(ok)) if ok else None
            std = (float(np.std(ok, ddof=1)) if len(ok) > 1 else 0.0) if ok else None
            writer.writerow(
                [v,
                 "yes" if v in _HAS_DECOUPLING else "no",
                 "yes" if v in _HAS_ASYM_FUSION else "no"]
                + [_fmt(x) for x in vals]
                + [_fmt(mean), _fmt(std), sum(1 for x in vals if x is None)])

    report_rel = os.path.join("reports", "ablation.json")
    _write_json(os.path.join(out, report_rel), {
        "config": to_plain(cfg),
        "seeds": seeds,
        "variants": variants,
        "runs": [o.to_plain() for o in outcomes],
        "ttests": ttests,
        "table": table_rel,
    })
    for v in variants:
        ok = [x for x in by_variant[v] if x is not None]
        mean = f"{np.mean(ok):.4f}" if ok else "all failed"
        print(f"{v}: mean test macro AUC {mean} over {len(ok)}/{len(seeds)} runs")
    print(f"wrote {os.path.join(out, report_rel)}")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args.config, args.set)
    sweep_cfg = cfg.eval.sweep
    param = args.param or sweep_cfg.param
    if args.values is not None:
        values = tuple(float(v) for v in args.values.split(",") if v.strip())
    else:
        values = sweep_cfg.values
    if not values:
        values = DEFAULT_SWEEP_VALUES.get(param, ())
    if not values:
        raise ConfigError(
            f"empty value list for sweep parameter {param!r} and no default "
            f"grid; pass --values")
    seeds = list(range(args.seeds)) if args.seeds is not None \
        else list(sweep_cfg.seeds)
    t_cfg = cfg.train
    if sweep_cfg.epochs is not None:
        t_cfg = replace(t_cfg, epochs=sweep_cfg.epochs)

    out = args.out or cfg.output_dir
    _ensure_tree(out)
    tr, va, te, schema, _ = load_bundle(cfg.data)
    rows = run_sweep(param, values, seeds, tr, va, te, schema, cfg.model,
                     t_cfg, jobs=args.jobs)

    grid_rel = os.path.join("grids", f"sweep_{param}.csv")
    write_sweep_csv(os.path.join(out, grid_rel), rows)
    report_rel = os.path.join("reports", f"sweep_{param}.json")
    _write_json(os.path.join(out, report_rel), {
        "config": to_plain(cfg),
        "param": param,
        "values": list(values),
        "seeds": seeds,
        "rows": [{"value": r.value,
                  "mean_auroc": r.mean_auroc,
                  "std_auroc": r.std_auroc,
                  "n_failed": r.n_failed,
                  "cells": [vars(c).copy() for c in r.cells]}
                 for r in rows],
        "grid": grid_rel,
    })
    for r in rows:
        mean = f"{r.mean_auroc:.4f}" if r.mean_auroc is not None else "failed"
        print(f"{param}={r.value:g}: mean test macro AUC {mean}")
    print(f"wrote {os.path.join(out, grid_rel)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dafted",
        description="Train and dissect decoupled asymmetric fusion models "
                    "on tabular + time-series data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True,
                           help="path to a JSON run config")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--out", default=None,
                       help="output directory (default: config output_dir)")

    p = sub.add_parser("generate-data", help="write synthetic CSVs + manifest")
    add_common(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one model, save checkpoint + report")
    add_common(p)
    p.add_argument("--variant", default=None, help="model variant override")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a data split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="run config JSON supplying the data section")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="variant grid on shared seeds + t-tests")
    add_common(p)
    p.add_argument("--seeds", type=int, default=5,
                   help="number of seeds (0..k-1) shared across variants")
    p.add_argument("--jobs", type=int, default=1,
                   help="concurrent worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="single-parameter grid sweep")
    add_common(p)
    p.add_argument("--param", default=None,
                   help="parameter to sweep (default from config)")
    p.add_argument("--values", default=None,
                   help="comma-separated grid values")
    p.add_argument("--seeds", type=int, default=None,
                   help="number of seeds (0..k-1)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TrainingAbort, NumericsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if isinstance(exc, TrainingAbort):
            print(f"component: {exc.component}", file=sys.stderr)
        return 3
    except DaftedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
