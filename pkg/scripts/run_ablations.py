"""Ablation sweeps on the synthetic set: reweighting variants and negative
scope, decoder depth, and mask ratio.

Usage:
    python scripts/run_ablations.py --out runs/ablations [--epochs 40]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from dismae.config import RunConfig
from dismae.data import generate_factored_dataset, split_train_val
from dismae.config import FactorSpec
from dismae.evaluation import run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seeds", default="0")
    args = ap.parse_args()

    out = Path(args.out)
    cfg = RunConfig()
    cfg.model.num_classes = 0
    cfg.train.epochs = args.epochs
    cfg.train.backbone_lr = 1e-3
    cfg.train.adaptive_interval = 5
    cfg.eval.label_fraction = 1.0

    ds = generate_factored_dataset(FactorSpec(seed=100, noise_std=0.02), out / "data")
    train_ds, val_ds = split_train_val(ds, cfg.eval.val_fraction, cfg.eval.seed)

    grid = {
        "weight_modes": ["ipw", "none", "random", "reverse"],
        "inter_domain_negatives": True,
        "decoder_depths": [1, 2, 4, 8],
        "mask_ratios": [0.5, 0.6, 0.7, 0.8, 0.9],
        "seeds": [int(s) for s in args.seeds.split(",")],
    }
    results = run_ablation(cfg, grid, train_ds, val_ds, out)
    print(json.dumps({k: {kk: vv for kk, vv in v.items() if kk != "seeds"} for k, v in results.items()}, indent=2))


if __name__ == "__main__":
    main()
