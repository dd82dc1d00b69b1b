"""Sweep the decoupling weight and emit the grid CSV."""
import argparse
import json
import os
import sys
import tempfile

from dafted.cli import main as dafted_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--param", default="lambda",
                    choices=["lambda", "tau", "w_shsd", "w_reg",
                             "batch_size", "learning_rate"])
    ap.add_argument("--values", default=None,
                    help="comma-separated grid; default grid for lambda/tau")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args(argv)

    config = {
        "data": {"synthetic": {"n_samples": 900}},
        "eval": {"sweep": {"param": args.param, "epochs": args.epochs,
                           "seeds": list(range(args.seeds))}},
        "output_dir": args.out,
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(config, fh)
        cfg_path = fh.name
    cmd = ["sweep", "--config", cfg_path, "--jobs", str(args.jobs)]
    if args.values:
        cmd += ["--values", args.values]
    try:
        return dafted_main(cmd)
    finally:
        os.unlink(cfg_path)


if __name__ == "__main__":
    sys.exit(run())
