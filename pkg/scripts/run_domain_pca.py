#!/usr/bin/env python3
"""Token-space domain analysis: project per-subject mean tokens to 2D and
report how strongly wild and studio subjects separate, for one or more
checkpoints.

Usage:
  python3 scripts/run_domain_pca.py --wild W/manifest.jsonl \
      --studio S/manifest.jsonl --checkpoint pre.ckpt mixed.ckpt --out out/pca
"""

import argparse
import json
from pathlib import Path

from lca.pipeline import load_checkpoint
from lca.train import pca_tokens


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wild", required=True)
    ap.add_argument("--studio", required=True)
    ap.add_argument("--checkpoint", nargs="+", required=True)
    ap.add_argument("--out", default="out/pca")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ckpt in args.checkpoint:
        model = load_checkpoint(ckpt)
        rep = pca_tokens(model, args.wild, args.studio)
        name = Path(ckpt).stem
        with open(out / f"pca_{name}.json", "w") as f:
            json.dump(rep, f)
        print(f"{name:24s} separation {rep['separation']:.3f}")


if __name__ == "__main__":
    main()
