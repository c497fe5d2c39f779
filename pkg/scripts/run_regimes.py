#!/usr/bin/env python3
"""Train the four data regimes (plus gamma and decoder-branch arms) on fresh
synthetic datasets and print the trend summary.

Usage: python3 scripts/run_regimes.py [--work-dir DIR] [--seeds 0 1 2]
"""

import argparse
import json
import time
from pathlib import Path

from lca.synth import CaptureConfig, build_dataset
from lca.train import Budget, compare_regimes, trend_summary


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work-dir", default="out/regimes")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--wild-subjects", type=int, default=16)
    ap.add_argument("--studio-subjects", type=int, default=12)
    ap.add_argument("--frames", type=int, default=6)
    ap.add_argument("--pre-steps", type=int, default=500)
    ap.add_argument("--post-steps", type=int, default=200)
    args = ap.parse_args()

    work = Path(args.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    wild = build_dataset(work / "wild", args.wild_subjects, args.frames,
                         CaptureConfig(mode="wild"), seed=11)
    studio = build_dataset(work / "studio", args.studio_subjects, args.frames,
                           CaptureConfig(mode="studio"), seed=21)
    res = compare_regimes(work, str(wild), str(studio), seeds=tuple(args.seeds),
                          budget=Budget(pre_steps=args.pre_steps,
                                        post_steps=args.post_steps,
                                        batch_size=2),
                          gammas=(0.65, 0.0), with_single_branch=True)
    for seed, arms in res["arms"].items():
        print(f"-- seed {seed}")
        for arm, r in arms.items():
            print(f"  {arm:18s} studio {r['studio']['psnr']:6.2f} dB"
                  f"  wild {r['wild']['psnr']:6.2f} dB")
    summary = trend_summary(res)
    print(json.dumps(summary, indent=2))
    print(f"total {time.time() - t0:.0f}s; full results in {work}/compare.json")


if __name__ == "__main__":
    main()
