"""Train the four core variants on the synthetic task and print the
ablation table with pairwise t-tests.

Artifacts land under --out: per-run rows in grids/ablation.csv, the full
report (per-seed AUCs, test statistics) in reports/ablation.json.
"""
import argparse
import json
import os
import sys
import tempfile

from dafted.cli import main as dafted_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--n-samples", type=int, default=900)
    ap.add_argument("--noise-sigma", type=float, default=None,
                    help="override the generator's noise level")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args(argv)

    synth = {"n_samples": args.n_samples}
    if args.noise_sigma is not None:
        synth["noise_sigma"] = args.noise_sigma
    config = {
        "data": {"synthetic": synth},
        "train": {"epochs": args.epochs},
        "output_dir": args.out,
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(config, fh)
        cfg_path = fh.name
    try:
        return dafted_main(["ablate", "--config", cfg_path,
                            "--seeds", str(args.seeds),
                            "--jobs", str(args.jobs)])
    finally:
        os.unlink(cfg_path)


if __name__ == "__main__":
    sys.exit(run())
