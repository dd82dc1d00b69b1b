"""Train one dafted run, export validation embeddings, and summarize the
shared/specific geometry: the cosine separation statistic plus per-class
centroid cosines for each modality pair."""
import argparse
import json
import os
import sys
import tempfile

import numpy as np

from dafted.cli import main as dafted_main
from dafted.evaluation import read_embeddings


def centroid_cos(a, b, labels):
    out = {}
    for c in sorted(set(labels.tolist())):
        ca, cb = a[labels == c].mean(0), b[labels == c].mean(0)
        out[c] = float(ca @ cb / (np.linalg.norm(ca) * np.linalg.norm(cb)))
    return out


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lambda", dest="lam", type=float, default=1.0)
    ap.add_argument("--out", default="runs/inspect")
    args = ap.parse_args(argv)

    config = {
        "data": {"synthetic": {"n_samples": 900}},
        "train": {"epochs": args.epochs, "seed": args.seed,
                  "lambda_decoupling": args.lam},
        "output_dir": args.out,
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(config, fh)
        cfg_path = fh.name
    try:
        rc = dafted_main(["train", "--config", cfg_path])
    finally:
        os.unlink(cfg_path)
    if rc != 0:
        return rc

    path = os.path.join(args.out, "embeddings", f"dafted_seed{args.seed}_val.csv")
    ids, labels, mats = read_embeddings(path)
    z_s, z_sh, z_sp = mats["ts"], mats["tab_shared"], mats["tab_specific"]

    def mean_cos(a, b):
        num = (a * b).sum(1)
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        return float((num / den).mean())

    cos_sh, cos_sp = mean_cos(z_s, z_sh), mean_cos(z_s, z_sp)
    print(f"\nval embeddings: {len(ids)} samples, d={z_s.shape[1]}")
    print(f"mean cos(ts, tab_shared)   = {cos_sh:+.4f}")
    print(f"mean cos(ts, tab_specific) = {cos_sp:+.4f}")
    print(f"separation                 = {cos_sh - cos_sp:+.4f}")
    print(f"per-class centroid cos, shared:   {centroid_cos(z_s, z_sh, labels)}")
    print(f"per-class centroid cos, specific: {centroid_cos(z_s, z_sp, labels)}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
