"""Command-line entry points: `lca <subcommand>`.

Every subcommand accepts `--config <yaml>` (keys merge under the CLI flags,
flags win) and `--seed <n>`.  The env var LCA_THREADS caps numeric-library
parallelism and must be set before the process starts using BLAS.
"""

from __future__ import annotations

import os

if "LCA_THREADS" in os.environ:
    _n = os.environ["LCA_THREADS"]
    for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_k, _n)

import argparse
import json
import sys
import time
from pathlib import Path


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    import yaml
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise SystemExit(f"config {path} must be a mapping")
    return data


def _opt(args, cfg: dict, key: str, default=None):
    v = getattr(args, key.replace("-", "_"), None)
    if v is not None:
        return v
    return cfg.get(key, default)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_create(args):
    import numpy as np
    cfg = _load_config(args.config)
    views = int(_opt(args, cfg, "views", 4))
    if not 1 <= views <= 4:
        raise SystemExit(f"--views must be 1..4, got {views}")
    from .pipeline import build_avatar, load_checkpoint
    from .avatar import save_avatar, DrivingSignal
    from .synth import generate_teacher, studio_ring, render_view, face_camera
    from .train import make_model, StageConfig

    t0 = time.perf_counter()
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = make_model(StageConfig(stage="pretrain", manifest="unused",
                                       seed=args.seed))
    teacher = generate_teacher(int(_opt(args, cfg, "teacher-seed", args.seed)))
    rest = DrivingSignal.rest(teacher.rig)
    enc = model.config
    ring = studio_ring(12, teacher.rig, enc.img_w, enc.img_h)
    body = np.stack([render_view(teacher, rest, ring[i * 3])[0]
                     for i in range(views)])
    face = np.stack([render_view(teacher, rest,
                                 face_camera(teacher.rig, 2 * np.pi * i / views,
                                             enc.img_w, enc.img_h))[0]
                     for i in range(views)])
    avatar = build_avatar(model, body, face,
                          deformer=bool(_opt(args, cfg, "deformer", False)),
                          record_attention=bool(_opt(args, cfg, "record-attention",
                                                     True)))
    save_avatar(avatar, args.out)
    print(f"avatar written to {args.out} in {time.perf_counter() - t0:.2f}s "
          f"({views} views, {avatar.canonical.count} Gaussians)")


def _read_signals(path: str, rig):
    import numpy as np
    from .avatar import DrivingSignal
    sigs = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            sigs.append(DrivingSignal(theta=np.array(rec["theta"]),
                                      expression=np.array(rec["expression"]),
                                      gaze=np.array(rec["gaze"])))
    return sigs


def cmd_animate(args):
    import numpy as np
    from .avatar import load_avatar
    from .pipeline import drive_frame
    from .serve import default_camera, png_bytes
    avatar = load_avatar(args.avatar)
    sigs = _read_signals(args.signals, avatar.rig)
    cam = default_camera(avatar)
    if args.camera:
        camcfg = _load_config(args.camera)
        from .avatar import Camera
        cam = Camera.look_at(camcfg["eye"], camcfg["target"],
                             fx=camcfg.get("fx", 40.0), fy=camcfg.get("fy", 40.0),
                             width=camcfg.get("width", 64),
                             height=camcfg.get("height", 48))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = []
    for i, sig in enumerate(sigs):
        rgb, _, t = drive_frame(avatar, sig, cam)
        (out / f"frame_{i:05d}.png").write_bytes(png_bytes(rgb))
        timings.append(t)
    med = float(np.median([t["pose_decode"] for t in timings]) * 1e3)
    report = {"frames": len(sigs),
              "pose_decode_ms_median": med,
              "render_ms_median": float(np.median([t["render"] for t in timings]) * 1e3)}
    (out / "timings.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))


def cmd_train(args):
    from .train import StageConfig, run_stage
    from .loss import LossWeights
    cfg = _load_config(args.config)
    cfg.setdefault("stage", "pretrain")
    cfg["seed"] = args.seed
    lw = cfg.pop("loss_weights", None)
    sc = StageConfig(**cfg, loss_weights=LossWeights(**lw) if lw else LossWeights())
    _, log = run_stage(sc)
    print(f"trained {sc.steps} steps; final loss {log[-1]['loss']:.4f}"
          if log else "no steps run")


def cmd_eval(args):
    from .pipeline import load_checkpoint
    from .train import evaluate, train_subject_ids
    model = load_checkpoint(args.checkpoint)
    ids = train_subject_ids(*(args.train_manifest or [args.manifest]))
    rep = evaluate(model, args.manifest, ids, split=args.split)
    out = json.dumps(rep.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(out)
    print(out)


def cmd_compare(args):
    from .train import compare_regimes, trend_summary, Budget
    from .synth import build_dataset, CaptureConfig
    cfg = _load_config(args.config)
    work = Path(_opt(args, cfg, "work-dir", "compare_out"))
    work.mkdir(parents=True, exist_ok=True)
    wild = _opt(args, cfg, "wild-manifest")
    studio = _opt(args, cfg, "studio-manifest")
    if wild is None:
        wild = build_dataset(work / "wild", int(cfg.get("wild_subjects", 12)),
                             int(cfg.get("frames", 6)),
                             CaptureConfig(mode="wild"), seed=args.seed + 11)
        studio = build_dataset(work / "studio", int(cfg.get("studio_subjects", 8)),
                               int(cfg.get("frames", 6)),
                               CaptureConfig(mode="studio"), seed=args.seed + 21)
    seeds = cfg.get("seeds", [0, 1, 2])
    budget = Budget(**cfg.get("budget", {}))
    res = compare_regimes(work, str(wild), str(studio), seeds=seeds,
                          budget=budget, gammas=tuple(cfg.get("gammas", (0.65,))),
                          with_single_branch=bool(cfg.get("single_branch", False)))
    print(json.dumps(trend_summary(res), indent=2))


def cmd_ablate(args):
    cfg = _load_config(args.config)
    which = args.which
    work = Path(_opt(args, cfg, "work-dir", f"ablate_{which}"))
    work.mkdir(parents=True, exist_ok=True)
    if which == "gamma":
        from .train import compare_regimes, trend_summary, Budget
        from .synth import build_dataset, CaptureConfig
        wild = build_dataset(work / "wild", 12, 6, CaptureConfig(mode="wild"),
                             seed=args.seed + 11)
        studio = build_dataset(work / "studio", 8, 6, CaptureConfig(mode="studio"),
                               seed=args.seed + 21)
        res = compare_regimes(work, str(wild), str(studio),
                              seeds=cfg.get("seeds", [0]),
                              budget=Budget(**cfg.get("budget", {})),
                              gammas=(0.65, 0.0, 0.3, 1.0))
        print(json.dumps(trend_summary(res), indent=2))
    elif which == "decoder-branch":
        from .train import compare_regimes, trend_summary, Budget
        from .synth import build_dataset, CaptureConfig
        wild = build_dataset(work / "wild", 12, 6, CaptureConfig(mode="wild"),
                             seed=args.seed + 11)
        studio = build_dataset(work / "studio", 8, 6, CaptureConfig(mode="studio"),
                               seed=args.seed + 21)
        res = compare_regimes(work, str(wild), str(studio),
                              seeds=cfg.get("seeds", [0]),
                              budget=Budget(**cfg.get("budget", {})),
                              with_single_branch=True)
        print(json.dumps(trend_summary(res), indent=2))
    elif which == "data-scale":
        from .train import data_scale_ablation, Budget
        out = data_scale_ablation(work, seed=args.seed,
                                  budget=Budget(**cfg.get("budget", {})))
        print(json.dumps({k: v["psnr"] for k, v in out.items()}, indent=2))
    elif which == "deformer":
        from .train import deformer_ablation, Budget
        out = deformer_ablation(work, seed=args.seed,
                                budget=Budget(**cfg.get("budget", {})))
        print(json.dumps(out["summary"], indent=2))
    else:
        raise SystemExit(f"unknown ablation {which}")


def cmd_bench(args):
    import numpy as np
    from .avatar import load_avatar
    from .pipeline import bench_render
    from .serve import default_camera
    from .synth import sample_signal
    avatar = load_avatar(args.avatar)
    cam = default_camera(avatar)
    rng = np.random.default_rng(args.seed)
    signals = [sample_signal(rng, avatar.rig) for _ in range(int(args.frames))]
    report = bench_render(avatar, signals, cam)
    out = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(out)
    print(out)


def cmd_serve(args):
    from .serve import serve
    server = serve(args.host, args.port, args.avatar)
    # flush so supervising processes see the bound port immediately
    print(f"serving on {args.host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()


def cmd_plot(args):
    from .plots import render_reports
    written = render_reports(Path(args.reports), Path(args.out))
    for p in written:
        print(p)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="lca",
                                     description="desk-scale animatable avatar toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("create", help="encode images into an avatar file"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_create)

    p = common(sub.add_parser("animate", help="drive an avatar through a signal file"))
    p.add_argument("--avatar", required=True)
    p.add_argument("--signals", required=True)
    p.add_argument("--camera", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_animate)

    p = common(sub.add_parser("train", help="run one training stage"))
    p.set_defaults(fn=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on a manifest"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-manifest", action="append", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = common(sub.add_parser("compare", help="train and compare data regimes"))
    p.add_argument("--work-dir", default=None)
    p.add_argument("--wild-manifest", default=None)
    p.add_argument("--studio-manifest", default=None)
    p.set_defaults(fn=cmd_compare)

    p = common(sub.add_parser("ablate", help="run one ablation"))
    p.add_argument("which", choices=["decoder-branch", "gamma", "data-scale",
                                     "deformer"])
    p.add_argument("--work-dir", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = common(sub.add_parser("bench", help="driving-path timing report"))
    p.add_argument("--avatar", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)

    p = common(sub.add_parser("serve", help="run the driving service"))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7707)
    p.add_argument("--avatar", default=None)
    p.set_defaults(fn=cmd_serve)

    p = common(sub.add_parser("plot", help="render report plots"))
    p.add_argument("--reports", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
