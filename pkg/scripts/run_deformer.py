#!/usr/bin/env python3
"""Garment ablation: embedded deformation versus fixed skinning on
garment-only subjects. Prints PSNR and the garment splitting statistic for
both variants.

Usage: python3 scripts/run_deformer.py [--work-dir DIR] [--seed N]
"""

import argparse
import json
from pathlib import Path

from lca.train import Budget, deformer_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work-dir", default="out/deformer")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()
    out = deformer_ablation(Path(args.work_dir), seed=args.seed,
                            budget=Budget(pre_steps=args.steps, post_steps=0,
                                          batch_size=2))
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
