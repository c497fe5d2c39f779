"""Two-stage training driver, evaluation, regime comparison, ablations, and
token-space analysis.

Desk-scale budgets: hundreds of steps on the toy encoder profile.  All runs
are pure functions of (config, seed); logs are line-delimited JSON.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import engine as eng
from .avatar import DrivingSignal, default_rig
from .engine import Tensor
from .loss import LossWeights, l1_loss, ssim_map, total_loss
from .net import EncoderConfig, LCAModel
from .optim import OptimState, adamw_step, clip_global_norm, lr_schedule
from .pipeline import (build_avatar, drive_frame, forward_sample,
                       load_checkpoint, pose_gaussians_np, save_checkpoint)
from .skinning import SkinWeightField
from .synth import CaptureConfig, Subject, build_dataset, load_manifest

TEMPLATE_ANCHORS = 256


class TrainingAborted(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: str                      # pretrain | posttrain
    manifest: str | None = None
    mix_manifest: str | None = None  # second source for 50:50 mixing
    steps: int = 300
    batch_size: int = 2
    gamma: float = 0.65             # layer-wise decay, posttrain only
    n_views: tuple = (1, 4)
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    seed: int = 0
    # desk-scale rate: the toy model trains for a few hundred steps only, so
    # the reference full-scale 4e-4 is far too timid here
    base_lr: float = 6e-3
    warmup_frac: float = 0.03
    deformer: bool = False
    single_branch: bool = False
    encoder: dict = field(default_factory=dict)
    log_path: str | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage not in ("pretrain", "posttrain"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "posttrain" and self.checkpoint_in is None:
            raise ValueError("posttrain requires an input checkpoint")


def template_rig():
    return default_rig(TEMPLATE_ANCHORS, seed=0, scale=1.0)


def make_model(cfg: StageConfig) -> LCAModel:
    rig = template_rig()
    enc = dict(cfg.encoder)
    enc.setdefault("theta_dim", rig.pose_dim)
    enc["single_branch"] = cfg.single_branch
    return LCAModel(EncoderConfig.toy(**enc), rig, seed=cfg.seed)


def _lr_scales(model: LCAModel, gamma: float) -> dict | None:
    """Per-parameter LR multipliers for layer-wise decay (1.0 for the heads)."""
    if gamma == 1.0:
        return None
    num = model.config.layers
    scales = {}
    for name in model.params:
        layer = model.layer_of(name)
        if layer is None:
            scales[name] = 1.0
        elif layer < 0:
            scales[name] = gamma ** num       # embedders sit below layer 0
        else:
            scales[name] = gamma ** (num - 1 - layer)
    return scales


def _pick_sample(subjects: list[Subject], rng: np.random.Generator,
                 n_range: tuple) -> tuple[Subject, np.ndarray, dict]:
    subj = subjects[int(rng.integers(len(subjects)))]
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    views = rng.choice(len(subj.cond_body), size=n, replace=False)
    target = subj.targets[int(rng.integers(len(subj.targets)))]
    return subj, views, target


def _train_pools(cfg: StageConfig) -> list[list[Subject]]:
    pools = []
    for man in (cfg.manifest, cfg.mix_manifest):
        if man is None:
            continue
        _, subjects = load_manifest(man)
        pool = [s for s in subjects if s.split == "train"]
        if not pool:
            raise ValueError(f"no training subjects in {man}")
        pools.append(pool)
    if not pools:
        raise ValueError("stage config names no manifest")
    return pools


def run_stage(cfg: StageConfig, model: LCAModel | None = None
              ) -> tuple[LCAModel, list[dict]]:
    """Train one stage; returns the model and the per-step log records."""
    if model is None:
        model = (load_checkpoint(cfg.checkpoint_in) if cfg.checkpoint_in
                 else make_model(cfg))
    pools = _train_pools(cfg)
    field_w = SkinWeightField(model.rig)
    rng = np.random.default_rng(cfg.seed)
    opt = OptimState(base_lr=cfg.base_lr)
    scales = _lr_scales(model, cfg.gamma) if cfg.stage == "posttrain" else None
    warmup = max(1, int(cfg.warmup_frac * cfg.steps)) if cfg.steps > 1 else 0
    anchors = np.repeat(model.rig.rest_points,
                        model.config.gaussians_per_token, axis=0)
    log: list[dict] = []
    params = {k: p.data for k, p in model.params.items()}

    for step in range(cfg.steps):
        eng.zero_grads(model.params.values())
        reports = []
        batch_meta = []
        for b in range(cfg.batch_size):
            pool = pools[b % len(pools)]
            subj, views, target = _pick_sample(pool, rng, cfg.n_views)
            batch_meta.append({"subject": subj.subject_id, "views": views.tolist()})
            out = forward_sample(model, field_w, subj.cond_body[views],
                                 subj.cond_face[views], target["signal"],
                                 target["camera"], deformer=cfg.deformer)
            total, rep = total_loss(
                target["image"], out.img_cano[..., :3], out.img_pose[..., :3],
                target["mask"], out.cano["position"],
                eng.exp(out.cano["log_scale"]), anchors, cfg.loss_weights,
                arap_term=out.arap, skin_term=out.skw,
                smooth_term=out.smooth)
            if not np.isfinite(rep.total):
                _dump_abort(cfg, step, batch_meta, rep)
                raise TrainingAborted(f"non-finite loss at step {step}")
            try:
                eng.backward(total * (1.0 / cfg.batch_size))
            except eng.NonFiniteError as exc:
                _dump_abort(cfg, step, batch_meta, rep)
                raise TrainingAborted(
                    f"non-finite gradient at step {step}") from exc
            reports.append(rep)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in model.params.items()}
        grads, norm = clip_global_norm(grads, 1.0)
        # the schedule touches exactly 0 at step 0 and the optimizer rejects
        # non-positive rates; floor it at 0.1% of base
        lr = max(lr_schedule(step, cfg.steps, warmup, cfg.base_lr),
                 1e-3 * cfg.base_lr)
        adamw_step(params, grads, opt, lr, lr_scale=scales)
        rec = {"step": step, "lr": lr, "grad_norm": norm,
               "loss": float(np.mean([r.total for r in reports])),
               "l1_pose": float(np.mean([r.l1_pose for r in reports]))}
        log.append(rec)

    if cfg.log_path:
        with open(cfg.log_path, "w") as f:
            for rec in log:
                f.write(json.dumps(rec) + "\n")
    if cfg.checkpoint_out:
        save_checkpoint(cfg.checkpoint_out, model,
                        extra={"steps": np.array([cfg.steps])})
    return model, log


def _dump_abort(cfg: StageConfig, step: int, batch_meta: list, rep):
    path = Path(cfg.checkpoint_out or "abort").with_suffix(".abort.json")
    with open(path, "w") as f:
        json.dump({"step": step, "batch": batch_meta, "loss": rep.to_dict(),
                   "stage": cfg.stage, "seed": cfg.seed}, f, indent=2)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    split: str
    l1: float
    psnr: float
    ssim: float
    per_subject: dict

    def to_dict(self):
        return asdict(self)


def masked_metrics(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> dict:
    m = mask.astype(bool)
    if not m.any():
        raise ValueError("empty mask")
    diff = np.abs(pred - target)[m]
    l1 = float(diff.mean())
    mse = float(((pred - target)[m] ** 2).mean())
    psnr = float(10.0 * np.log10(1.0 / max(mse, 1e-12)))
    s = ssim_map(Tensor(pred.astype(np.float32)),
                 Tensor(target.astype(np.float32))).numpy()
    ssim = float(s[m].mean())
    return {"l1": l1, "psnr": psnr, "ssim": ssim}


def evaluate(model: LCAModel, manifest: str, train_subject_ids: set,
             split: str = "test", n_views: int = 4, deformer: bool = False,
             max_frames: int | None = None) -> EvalReport:
    """Held-out evaluation through the same driving path serving uses.

    Conditioning is fixed at ``n_views`` views; any overlap between the eval
    subjects and the training subject set is a hard error.
    """
    _, subjects = load_manifest(manifest)
    pool = [s for s in subjects if s.split == split]
    leaked = {s.subject_id for s in pool} & set(train_subject_ids)
    if leaked:
        raise RuntimeError(f"split leakage: eval subjects seen in training: {sorted(leaked)}")
    per_subject = {}
    for s in pool:
        views = np.arange(min(n_views, len(s.cond_body)))
        avatar = build_avatar(model, s.cond_body[views], s.cond_face[views],
                              deformer=deformer)
        metrics = []
        for t in s.targets[:max_frames]:
            sig = _signal_from_vec(t["signal"], model.rig)
            rgb, _, _ = drive_frame(avatar, sig, t["camera"])
            metrics.append(masked_metrics(rgb, t["image"], t["mask"]))
        per_subject[s.subject_id] = {k: float(np.mean([m[k] for m in metrics]))
                                     for k in metrics[0]}
    agg = {k: float(np.mean([v[k] for v in per_subject.values()]))
           for k in ("l1", "psnr", "ssim")}
    return EvalReport(split=split, l1=agg["l1"], psnr=agg["psnr"],
                      ssim=agg["ssim"], per_subject=per_subject)


def _signal_from_vec(vec: np.ndarray, rig) -> DrivingSignal:
    pd = rig.pose_dim
    return DrivingSignal(theta=vec[:pd], expression=vec[pd:-6], gaze=vec[-6:])


def train_subject_ids(*manifests) -> set:
    out = set()
    for man in manifests:
        if man is None:
            continue
        _, subjects = load_manifest(man)
        out |= {s.subject_id for s in subjects if s.split == "train"}
    return out


# ---------------------------------------------------------------------------
# regime comparison and ablations
# ---------------------------------------------------------------------------

@dataclass
class Budget:
    pre_steps: int = 300
    post_steps: int = 100
    batch_size: int = 2

    @property
    def total(self) -> int:
        return self.pre_steps + self.post_steps


def _arm_config(stage, manifest, steps, seed, budget, out, **kw) -> StageConfig:
    return StageConfig(stage=stage, manifest=str(manifest), steps=steps,
                       batch_size=budget.batch_size, seed=seed,
                       checkpoint_out=str(out), **kw)


def compare_regimes(work_dir: str | Path, wild_manifest, studio_manifest,
                    seeds=(0, 1, 2), budget: Budget | None = None,
                    gammas=(0.65,), with_single_branch: bool = False) -> dict:
    """Table-style comparison: four training regimes on two test splits.

    Arms share budgets, data, and configs; they differ only in which manifests
    feed the sampler and (for post-training) the layer-wise decay.  Optionally
    also runs the gamma sweep arms and the single-branch decoder from the same
    pretrained checkpoints.
    """
    budget = budget or Budget()
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    train_ids = train_subject_ids(wild_manifest, studio_manifest)
    results: dict = {"budget": asdict(budget), "seeds": list(seeds), "arms": {}}

    def eval_both(model) -> dict:
        return {
            "studio": evaluate(model, studio_manifest, train_ids).to_dict(),
            "wild": evaluate(model, wild_manifest, train_ids).to_dict(),
        }

    for seed in seeds:
        seed_out: dict = {}
        # single-source and mixed arms, all at the same total budget
        arms = {
            "wild_only": dict(manifest=wild_manifest),
            "studio_only": dict(manifest=studio_manifest),
            "mixed": dict(manifest=wild_manifest, mix_manifest=str(studio_manifest)),
        }
        for name, src in arms.items():
            cfg = _arm_config("pretrain", src["manifest"], budget.total, seed,
                              budget, work / f"{name}_s{seed}.ckpt",
                              mix_manifest=src.get("mix_manifest"))
            model, _ = run_stage(cfg)
            seed_out[name] = eval_both(model)
        # two-stage arm: reuse nothing from the arms above — fresh pretrain at
        # pre_steps, then post-train per gamma
        pre_cfg = _arm_config("pretrain", wild_manifest, budget.pre_steps, seed,
                              budget, work / f"pre_s{seed}.ckpt")
        run_stage(pre_cfg)
        for gamma in gammas:
            # fine-tuning runs at a third of the pretraining rate: at the
            # full 6e-3 the unfrozen lower layers overwrite their pretrained
            # features within a couple hundred steps, which erases exactly
            # the adaptation-vs-freezing contrast the gamma sweep measures
            post_cfg = _arm_config("posttrain", studio_manifest,
                                   budget.post_steps, seed, budget,
                                   work / f"prepost_g{gamma}_s{seed}.ckpt",
                                   checkpoint_in=str(work / f"pre_s{seed}.ckpt"),
                                   gamma=gamma, base_lr=2e-3)
            model, _ = run_stage(post_cfg)
            key = "prepost" if gamma == gammas[0] else f"prepost_g{gamma}"
            seed_out[key] = eval_both(model)
        if with_single_branch:
            sp = _arm_config("pretrain", wild_manifest, budget.pre_steps, seed,
                             budget, work / f"single_pre_s{seed}.ckpt",
                             single_branch=True)
            run_stage(sp)
            spp = _arm_config("posttrain", studio_manifest, budget.post_steps,
                              seed, budget, work / f"single_s{seed}.ckpt",
                              checkpoint_in=str(work / f"single_pre_s{seed}.ckpt"),
                              gamma=gammas[0], single_branch=True,
                              base_lr=2e-3)
            model, _ = run_stage(spp)
            seed_out["single_branch"] = eval_both(model)
        results["arms"][str(seed)] = seed_out

    with open(work / "compare.json", "w") as f:
        json.dump(results, f, indent=2)
    return results


def trend_summary(results: dict) -> dict:
    """Boil the per-seed matrix down to the orderings under test."""
    wins_prepost_vs_mixed = 0
    wins_wild_lowest = 0
    wins_gamma = 0
    wins_dual = 0
    seeds = list(results["arms"])
    for s in seeds:
        r = results["arms"][s]
        pp, mx = r["prepost"], r["mixed"]
        if (pp["studio"]["psnr"] >= mx["studio"]["psnr"]
                and pp["wild"]["psnr"] >= mx["wild"]["psnr"]):
            wins_prepost_vs_mixed += 1
        studio_scores = {a: r[a]["studio"]["psnr"]
                         for a in ("wild_only", "studio_only", "mixed", "prepost")}
        if min(studio_scores, key=studio_scores.get) == "wild_only":
            wins_wild_lowest += 1
        if "prepost_g0.0" in r or "prepost_g0" in r:
            g0 = r.get("prepost_g0.0", r.get("prepost_g0"))
            if g0["studio"]["psnr"] < pp["studio"]["psnr"]:
                wins_gamma += 1
        if "single_branch" in r:
            if pp["studio"]["psnr"] >= r["single_branch"]["studio"]["psnr"]:
                wins_dual += 1
    return {"seeds": len(seeds),
            "prepost_ge_mixed_both_splits": wins_prepost_vs_mixed,
            "wild_only_lowest_on_studio": wins_wild_lowest,
            "gamma0_below_gamma065": wins_gamma,
            "dual_ge_single": wins_dual}


def data_scale_ablation(work_dir, subject_counts=(8, 16, 32), frames=6,
                        seed=0, budget: Budget | None = None) -> dict:
    """Pretraining-data scaling sweep: PSNR versus wild subject count."""
    budget = budget or Budget()
    work = Path(work_dir)
    out = {}
    studio = build_dataset(work / "scale_studio", 6, frames,
                           CaptureConfig(mode="studio"), seed=seed + 500)
    for count in subject_counts:
        man = build_dataset(work / f"scale_wild_{count}", count, frames,
                            CaptureConfig(mode="wild"), seed=seed + count)
        cfg = _arm_config("pretrain", man, budget.pre_steps, seed, budget,
                          work / f"scale_{count}.ckpt")
        model, _ = run_stage(cfg)
        ids = train_subject_ids(man, studio)
        out[str(count)] = evaluate(model, str(studio), ids).to_dict()
    with open(work / "data_scale.json", "w") as f:
        json.dump(out, f, indent=2)
    return out


def deformer_ablation(work_dir, seed: int = 0, budget: Budget | None = None,
                      num_subjects: int = 9, frames: int = 8,
                      stance_amounts=(0.5, 0.8, 1.1)) -> dict:
    """Loose-garment claim: embedded deformation vs fixed skinning.

    Trains both variants on a garment-only studio dataset with stronger pose
    sampling, then scores held-out garment subjects on PSNR and the splitting
    statistic over a widening-stance sequence.
    """
    from .synth import generate_teacher, wide_stance_signal
    budget = budget or Budget()
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    setup = {"seed": seed, "budget": asdict(budget),
             "stance_amounts": list(stance_amounts)}
    marker = work / "deformer.json"
    if marker.exists():
        cached = json.loads(marker.read_text())
        if cached.get("setup") == setup:
            return cached
    # strong pose sampling: garment splitting only shows once the hips move
    # well beyond the default studio range, and the photometric signal that
    # teaches the corrective field fades if training poses stay mild
    cap = CaptureConfig(mode="studio", pose_magnitude=0.75)
    man = build_dataset(work / "garment", num_subjects, frames, cap,
                        seed=seed + 900, garment_only=True)
    ids = train_subject_ids(man)
    _, subjects = load_manifest(man)
    test_pool = [s for s in subjects if s.split == "test"]
    out: dict = {}
    for name, deform in (("fixed", False), ("deformer", True)):
        # both arms share the config; the node count only matters on the
        # deformer path, where coarse nodes keep the learned weight-delta
        # field spatially smooth while the analytic field supplies the
        # per-Gaussian base.
        cfg = _arm_config("pretrain", man, budget.total, seed, budget,
                          work / f"{name}_s{seed}.ckpt", deformer=deform,
                          encoder={"n_node": 256}, base_lr=3e-3)
        model, _ = run_stage(cfg)
        rep = evaluate(model, str(man), ids, deformer=deform)
        gms = []
        for s in test_pool:
            teacher = generate_teacher(s.seed)
            if not teacher.has_garment:
                continue
            avatar = build_avatar(model, s.cond_body, s.cond_face, deformer=deform)
            gmask = label_garment(avatar.canonical.position, teacher)
            if gmask.sum() < 2:
                continue
            sigs = [wide_stance_signal(model.rig, a) for a in stance_amounts]
            gms.append(garment_metric(avatar, sigs, gmask))
        out[name] = {"psnr": rep.psnr,
                     "garment_metric": float(np.mean(gms)) if gms else float("nan")}
    out["summary"] = {
        "metric_ratio": out["deformer"]["garment_metric"] / out["fixed"]["garment_metric"],
        "psnr_gain_db": out["deformer"]["psnr"] - out["fixed"]["psnr"],
    }
    out["setup"] = setup
    with open(work / "deformer.json", "w") as f:
        json.dump(out, f, indent=2)
    return out


# ---------------------------------------------------------------------------
# token-space analysis
# ---------------------------------------------------------------------------

def pca_2d(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-2 principal component projection of [N,D] features."""
    x = features - features.mean(axis=0)
    if np.allclose(x, 0):
        raise ValueError("degenerate covariance: all features identical")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T, vt[:2]


def subject_features(model: LCAModel, subjects: list[Subject], n_views: int = 4
                     ) -> np.ndarray:
    feats = []
    for s in subjects:
        views = np.arange(min(n_views, len(s.cond_body)))
        tokens = model.encode(s.cond_body[views], s.cond_face[views])
        feats.append(tokens.numpy().mean(axis=0))
    return np.stack(feats)


def domain_separation(coords: np.ndarray, labels: list[str]) -> float:
    """Inter-domain centroid distance over mean intra-domain spread."""
    labels = np.asarray(labels)
    doms = sorted(set(labels.tolist()))
    if len(doms) != 2:
        raise ValueError("need exactly two domains")
    cents = {d: coords[labels == d].mean(axis=0) for d in doms}
    spread = np.mean([np.linalg.norm(coords[labels == d] - cents[d], axis=1).mean()
                      for d in doms])
    inter = np.linalg.norm(cents[doms[0]] - cents[doms[1]])
    return float(inter / max(spread, 1e-12))


def pca_tokens(model: LCAModel, wild_manifest, studio_manifest,
               split: str = "test") -> dict:
    """Per-subject mean-token embedding, PCA'd to 2D, tagged by domain."""
    groups = []
    for man, dom in ((wild_manifest, "wild"), (studio_manifest, "studio")):
        _, subjects = load_manifest(man)
        pool = [s for s in subjects if s.split == split]
        if len(pool) < 3:
            raise ValueError(f"need >= 3 {dom} subjects, got {len(pool)}")
        groups.append((pool, dom))
    feats, labels, names = [], [], []
    for pool, dom in groups:
        f = subject_features(model, pool)
        feats.append(f)
        labels += [dom] * len(pool)
        names += [s.subject_id for s in pool]
    coords, _ = pca_2d(np.concatenate(feats))
    return {"coords": coords.tolist(), "labels": labels, "subjects": names,
            "separation": domain_separation(coords, labels)}


# ---------------------------------------------------------------------------
# garment metric
# ---------------------------------------------------------------------------

def garment_gap(positions: np.ndarray, rest: np.ndarray | None = None) -> float:
    """Adjacent-gap statistic: 95th-percentile stretch of rest-adjacent pairs.

    Each point is paired with its nearest neighbor in the rest configuration;
    the statistic is the 95th percentile of posed pair distance divided by
    that pair's rest length.  Rigid motion gives exactly 1; a garment tearing
    along a seam drives it up without bound.  With ``rest`` omitted the
    positions are their own reference and the statistic is 1.

    Rest lengths are floored at half the median spacing: a pair that happens
    to sit almost on top of itself at rest would otherwise report enormous
    stretch for sub-resolution motion, which says nothing about tearing.
    """
    if len(positions) < 2:
        raise ValueError("need at least two garment Gaussians")
    if rest is None:
        rest = positions
    d, idx = cKDTree(rest).query(rest, k=2)
    j = idx[:, 1]
    rd = np.maximum(d[:, 1], max(0.5 * float(np.median(d[:, 1])), 1e-12))
    pd = np.linalg.norm(positions - positions[j], axis=1)
    return float(np.percentile(pd / rd, 95))


def garment_metric(avatar, signals: list[DrivingSignal],
                   garment_mask: np.ndarray) -> float:
    """Max over frames of the adjacent-gap statistic on the garment subset.

    A value near 1 means the garment shell stays as coherent as at rest; a
    splitting garment drives it up.
    """
    if not garment_mask.any():
        raise ValueError("no garment labels")
    rest = DrivingSignal.rest(avatar.rig)
    rest_pos = pose_gaussians_np(avatar, rest).position[garment_mask]
    worst = 0.0
    for sig in signals:
        g = pose_gaussians_np(avatar, sig)
        worst = max(worst, garment_gap(g.position[garment_mask], rest_pos))
    return worst


def label_garment(student_positions: np.ndarray, teacher) -> np.ndarray:
    """Tag student Gaussians whose canonical position is closer to the
    teacher's garment shell than to its body."""
    if not teacher.has_garment:
        raise ValueError("teacher has no garment shell")
    tg = teacher.canonical.position[teacher.garment_mask]
    tb = teacher.canonical.position[~teacher.garment_mask]
    dg, _ = cKDTree(tg).query(student_positions)
    db, _ = cKDTree(tb).query(student_positions)
    return dg < db
