"""Static plot emitters for the machine-readable reports.

Everything renders deterministically from report data; no experiment state is
touched.  Recognized inputs inside the reports directory:

* compare.json   -> grouped bar chart of PSNR per arm and split
* pca.json       -> two-color scatter of the token-space embedding
* bench.json     -> histogram of per-frame timings (if per-frame data present)
* deformer.json  -> paired bars for the garment ablation
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


class ReportError(RuntimeError):
    pass


def _load(path: Path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ReportError(f"corrupt report {path}: {exc}") from exc


def plot_compare(report: dict, out: Path) -> Path:
    arms_by_seed = report.get("arms", {})
    if not arms_by_seed:
        raise ReportError("compare report lists no arms")
    arm_names = sorted({a for seed in arms_by_seed.values() for a in seed})
    splits = ("studio", "wild")
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.35
    xs = np.arange(len(arm_names))
    for si, split in enumerate(splits):
        vals, errs = [], []
        for arm in arm_names:
            scores = [arms_by_seed[s][arm][split]["psnr"]
                      for s in arms_by_seed if arm in arms_by_seed[s]]
            vals.append(np.mean(scores))
            errs.append(np.std(scores))
        ax.bar(xs + (si - 0.5) * width, vals, width, yerr=errs,
               label=f"{split}-test", capsize=3)
    ax.set_xticks(xs)
    ax.set_xticklabels(arm_names, rotation=20, ha="right")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("training regimes")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_pca(report: dict, out: Path) -> Path:
    coords = np.asarray(report["coords"])
    labels = np.asarray(report["labels"])
    if coords.size == 0:
        raise ReportError("pca report has no coordinates")
    fig, ax = plt.subplots(figsize=(5, 5))
    for dom, color in (("wild", "tab:orange"), ("studio", "tab:blue")):
        sel = labels == dom
        ax.scatter(coords[sel, 0], coords[sel, 1], c=color, label=dom, s=36)
    ax.set_title(f"subject tokens (separation {report.get('separation', 0):.2f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_bench(report: dict, out: Path) -> Path:
    stages = report.get("stages", {})
    if not stages:
        raise ReportError("bench report has no stage timings")
    names = list(stages)
    meds = [stages[s]["median_ms"] for s in names]
    p95 = [stages[s]["p95_ms"] for s in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(names))
    ax.bar(xs - 0.2, meds, 0.4, label="median")
    ax.bar(xs + 0.2, p95, 0.4, label="p95")
    ax.set_xticks(xs)
    ax.set_xticklabels([n.replace("_", " ") for n in names], rotation=15)
    ax.set_ylabel("ms / frame")
    ax.set_title(f"driving path ({report.get('frames', '?')} frames, "
                 f"~{report.get('fps_estimate', 0):.0f} fps)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_deformer(report: dict, out: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    names = ["fixed", "deformer"]
    axes[0].bar(names, [report[n]["garment_metric"] for n in names])
    axes[0].set_title("garment splitting statistic")
    axes[1].bar(names, [report[n]["psnr"] for n in names])
    axes[1].set_title("garment-subject PSNR (dB)")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


RENDERERS = {
    "compare.json": plot_compare,
    "pca.json": plot_pca,
    "bench.json": plot_bench,
    "deformer.json": plot_deformer,
}


def render_reports(reports_dir: Path, out_dir: Path) -> list[Path]:
    reports_dir = Path(reports_dir)
    if not reports_dir.is_dir():
        raise ReportError(f"reports directory {reports_dir} does not exist")
    found = [p for p in sorted(reports_dir.iterdir()) if p.name in RENDERERS]
    if not found:
        raise ReportError(f"no recognized reports in {reports_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in found:
        renderer = RENDERERS[path.name]
        written.append(renderer(_load(path), out_dir / (path.stem + ".png")))
    return written
