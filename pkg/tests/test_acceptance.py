"""End-to-end acceptance criteria.

Each test prints one PASS/FAIL line for its criterion. The training-regime
criteria share one comparison run (module fixture, cached in out/acceptance)
and dominate the suite's runtime; everything else is fast.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from lca import engine as eng
from lca.avatar import (AvatarFormatError, Camera, DrivingSignal, GaussianSet,
                        default_rig, load_avatar, save_avatar)
from lca.engine import Tensor
from lca.loss import l1_loss, perceptual_loss, total_loss, LossWeights
from lca.net import EncoderConfig, LCAModel
from lca.pipeline import build_avatar, drive_frame, forward_sample
from lca.skinning import (SkinWeightField, arap_loss, axis_angle_to_matrix,
                          corrected_node_weights, build_node_graph,
                          forward_kinematics, knn_edges, lbs_points)
from lca.splat import render, render_np, project_gaussian
from lca.synth import CaptureConfig, build_dataset
from lca.train import Budget, compare_regimes, deformer_ablation, pca_tokens

from helpers import fd_check, params_of, random_scene

CACHE = Path(__file__).resolve().parent.parent / "out" / "acceptance"

# pinned desk-scale experiment shape for the training criteria
SEEDS = (0, 1, 2)
BUDGET = Budget(pre_steps=500, post_steps=200, batch_size=2)
WILD_SUBJECTS, STUDIO_SUBJECTS, FRAMES = 16, 12, 6


def report(name: str, ok: bool, detail: str = ""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}" + (f" — {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


def toy_setup(seed=0, **kw):
    cfg = EncoderConfig(layers=1, dim=32, heads=4, anchors=16, img_w=32,
                        img_h=32, n_node=8, **kw)
    rig = default_rig(cfg.anchors, seed=seed)
    model = LCAModel(cfg, rig, seed=seed)
    rng = np.random.default_rng(seed)
    body = rng.uniform(0, 1, (2, 32, 32, 3)).astype(np.float32)
    face = rng.uniform(0, 1, (2, 32, 32, 3)).astype(np.float32)
    return model, rig, body, face, rng


# ---------------------------------------------------------------------------
# 1. rasterizer oracles
# ---------------------------------------------------------------------------

def test_criterion_rasterizer_oracles():
    # analytic EWA falloff: one isotropic splat on the optical axis
    from lca.splat import ALPHA_CUTOFF, LOWPASS
    cam = Camera(fx=20.0, fy=20.0, cx=15.5, cy=15.5, width=32, height=32,
                 rotation=np.eye(3), translation=np.zeros(3))
    sigma, depth = 0.12, 2.0
    with eng.precision("float64"):
        rgb, alpha = render_np(np.array([[1.0, 0.0, 0.0]]),
                               np.array([[0.0, 0.0, depth]]), np.array([1.0]),
                               np.array([[1.0, 0, 0, 0]]),
                               np.array([[sigma] * 3]), cam, 32, 32)
    var = (cam.fx * sigma / depth) ** 2 + LOWPASS
    errs = []
    for col in range(10, 22):
        dx = (col + 0.5) - 15.5
        a = np.exp(-0.5 * dx * dx / var)
        a_expect = a if a >= ALPHA_CUTOFF else 0.0
        errs.append(abs(alpha[15, col] - a_expect))
    ewa_err = max(errs)

    # exact two-splat compositing: front alpha 0.5 red over back alpha ~1 blue
    rgb2, alpha2 = render_np(
        np.array([[1.0, 0, 0], [0.0, 0, 1.0]]),
        np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 3.0]]),
        np.array([0.5, 0.9999]),
        np.array([[1.0, 0, 0, 0]] * 2), np.array([[5.0] * 3] * 2), cam, 32, 32)
    # with near-flat huge gaussians the center pixel composites front-to-back
    w_front = alpha_front = 0.5
    w_back = (1 - alpha_front) * 0.9999
    comp_err = max(abs(rgb2[15, 15, 0] - w_front), abs(rgb2[15, 15, 2] - w_back))
    ok = ewa_err < 1e-4 and comp_err < 1e-4
    report("rasterizer analytic oracles", ok,
           f"EWA err {ewa_err:.2e}, compositing err {comp_err:.2e}")


# ---------------------------------------------------------------------------
# 2. finite-difference gradient suite
# ---------------------------------------------------------------------------

def test_criterion_gradient_suite():
    t0 = time.time()
    instances = 0
    worst = 0.0
    with eng.precision("float64"):
        # rasterizer: randomized small scenes, all five attribute groups
        for seed in range(45):
            rng = np.random.default_rng(1000 + seed)
            n = int(rng.integers(2, 11))
            color, pos, opac, quat, ls, cam = random_scene(rng, n=n)
            ps = params_of(color, pos, opac, quat, ls)

            def loss():
                c, p, o, q, log_s = ps
                img = render(c, p, o, q, eng.exp(log_s), cam, 32, 32)
                return eng.sum_(img * img) * (1.0 / img.data.size)
            worst = max(worst, fd_check(loss, ps, rng, probes_per_param=2))
            instances += 1

        # losses: photometric + perceptual on random images
        for seed in range(20):
            rng = np.random.default_rng(2000 + seed)
            target = rng.uniform(0, 1, (20, 20, 3))
            mask = np.zeros((20, 20), bool)
            mask[3:-3, 3:-3] = True
            p = eng.parameter(rng.uniform(0, 1, (20, 20, 3)))

            def loss():
                return (l1_loss(target, p, mask)
                        + perceptual_loss(target, p, mask))
            worst = max(worst, fd_check(loss, [p], rng, probes_per_param=4))
            instances += 1

        # skinning: LBS positions w.r.t. pose and points
        rig = default_rig(16, seed=0)
        field = SkinWeightField(rig)
        for seed in range(20):
            rng = np.random.default_rng(3000 + seed)
            n = int(rng.integers(4, 11))
            pts = eng.parameter(rig.rest_points[rng.choice(16, n, replace=False)]
                                + rng.normal(0, 0.02, (n, 3)))
            q0 = rng.normal(0, 1, (n, 4))
            q0 /= np.linalg.norm(q0, axis=1, keepdims=True)
            quats = eng.parameter(q0)
            theta = rng.normal(0, 0.1, rig.pose_dim)

            def loss():
                posed, posed_q = lbs_points(pts, quats, theta, field)
                return eng.sum_(posed * posed) + eng.sum_(posed_q * posed_q)
            worst = max(worst, fd_check(loss, [pts, quats], rng, probes_per_param=2))
            instances += 1

        # full pipeline: encode -> decode -> skin -> render -> total loss
        for seed in range(16):
            model, rig, body, face, rng = toy_setup(seed=4000 + seed)
            cam = Camera.look_at([0, 1, 2.3], [0, 1, 0], width=32, height=32,
                                 fx=40, fy=40)
            sig = DrivingSignal(theta=rng.normal(0, 0.05, rig.pose_dim),
                                expression=rng.normal(0, 0.2, 8),
                                gaze=np.zeros(6)).concat()
            target = rng.uniform(0, 1, (32, 32, 3))
            mask = np.zeros((32, 32), bool)
            mask[4:-4, 4:-4] = True
            fw = SkinWeightField(rig)
            names = list(model.params)
            picked = [model.params[names[int(rng.integers(len(names)))]]
                      for _ in range(2)]
            anchors = np.repeat(rig.rest_points,
                                model.config.gaussians_per_token, axis=0)

            def loss():
                out = forward_sample(model, fw, body, face, sig, cam)
                total, _ = total_loss(target, out.img_cano[..., :3],
                                      out.img_pose[..., :3], mask,
                                      out.cano["position"],
                                      eng.exp(out.cano["log_scale"]), anchors,
                                      LossWeights())
                return total
            worst = max(worst, fd_check(loss, picked, rng, probes_per_param=2))
            instances += 1

    dt = time.time() - t0
    ok = instances >= 100 and dt < 600
    report("finite-difference gradient suite", ok,
           f"{instances} instances, worst rel err {worst:.2e}, {dt:.0f}s")


# ---------------------------------------------------------------------------
# 3. structural invariants
# ---------------------------------------------------------------------------

def test_criterion_structural_invariants():
    details = []
    rig = default_rig(16, seed=0)
    field = SkinWeightField(rig)
    rng = np.random.default_rng(0)

    # rest-pose identity through the skinning path
    pts = Tensor(rig.rest_points + rng.normal(0, 0.02, (16, 3)))
    idq = Tensor(np.tile([1.0, 0, 0, 0], (16, 1)))
    posed, _ = lbs_points(pts, idq, np.zeros(rig.pose_dim), field)
    rest_err = np.abs(posed.numpy() - pts.numpy()).max()
    details.append(f"rest {rest_err:.1e}")

    # ARAP invariance under a rigid motion (float64)
    with eng.precision("float64"):
        cloud = rng.normal(0, 0.2, (40, 3))
        edges = knn_edges(cloud, k=6)
        r = axis_angle_to_matrix(np.array([0.3, -0.2, 0.5]))
        moved = cloud @ r.T + np.array([0.1, -0.3, 0.2])
        arap_err = arap_loss(Tensor(moved), cloud, edges).item()
    details.append(f"arap {arap_err:.1e}")

    # partition of unity: raw field and corrected node weights
    probe = rng.normal(0, 0.5, (200, 3)) + rig.rest_points.mean(axis=0)
    w = field.weights_np(probe)
    pou1 = np.abs(w.sum(axis=1) - 1).max()
    base = rng.dirichlet(np.ones(4), size=50)
    corr = rng.normal(0, 0.3, (50, 4))
    cw = corrected_node_weights(Tensor(base), Tensor(corr)).numpy()
    pou2 = np.abs(cw.sum(axis=1) - 1).max()
    details.append(f"pou {max(pou1, pou2):.1e}")

    # exact-zero cross-branch mask + N=1..4 + view permutation
    model, model_rig, body, face, rng2 = toy_setup(seed=5)
    model.record_attention = True
    model.encode(body, face)
    att = model.last_attention
    face_count = int(np.sum(model_rig.point_labels == 0))
    g = model.config.anchors
    n_views = body.shape[0]
    # face-geometry rows over body-image patch keys must be exactly zero
    body_keys = att[:face_count, g:g + n_views * model.config.patches]
    mask_exact = float(np.abs(body_keys).max())
    details.append(f"mask {mask_exact:.0e}")

    model.record_attention = False
    big_body = np.repeat(body, 2, axis=0)
    big_face = np.repeat(face, 2, axis=0)
    n_ok = True
    for n in (1, 2, 3, 4):
        model.encode(big_body[:n], big_face[:n])
    t2 = model.encode(body, face).numpy()
    perm = model.encode(body[::-1].copy(), face[::-1].copy()).numpy()
    view_err = np.abs(t2 - perm).max() / max(np.abs(t2).max(), 1e-12)
    details.append(f"viewperm {view_err:.1e}")

    # opacity never animated: posed set carries canonical opacity bit-for-bit
    av = build_avatar(model, body, face)
    from lca.pipeline import pose_gaussians_np
    sig = DrivingSignal(theta=rng2.normal(0, 0.2, model.rig.pose_dim),
                        expression=rng2.normal(0, 1, 8),
                        gaze=rng2.normal(0, 0.2, 6))
    posed_g = pose_gaussians_np(av, sig)
    opac_exact = np.array_equal(posed_g.opacity, av.canonical.opacity)
    details.append(f"opacity exact {opac_exact}")

    ok = (rest_err <= 1e-6 and arap_err <= 1e-8 and max(pou1, pou2) <= 1e-6
          and mask_exact == 0.0 and view_err <= 1e-5 and n_ok and opac_exact)
    report("structural invariants", ok, ", ".join(details))


# ---------------------------------------------------------------------------
# training-regime criteria (shared run)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def regimes():
    CACHE.mkdir(parents=True, exist_ok=True)
    marker = CACHE / "compare.json"
    wild = CACHE / "wild" / "manifest.jsonl"
    studio = CACHE / "studio" / "manifest.jsonl"
    if marker.exists():
        res = json.loads(marker.read_text())
        if (res.get("budget") == {"pre_steps": BUDGET.pre_steps,
                                  "post_steps": BUDGET.post_steps,
                                  "batch_size": BUDGET.batch_size}
                and res.get("seeds") == list(SEEDS)):
            return res
    if not wild.exists():
        build_dataset(CACHE / "wild", WILD_SUBJECTS, FRAMES,
                      CaptureConfig(mode="wild"), seed=11)
        build_dataset(CACHE / "studio", STUDIO_SUBJECTS, FRAMES,
                      CaptureConfig(mode="studio"), seed=21)
    return compare_regimes(CACHE, str(wild), str(studio), seeds=SEEDS,
                           budget=BUDGET, gammas=(0.65, 0.0),
                           with_single_branch=True)


def _wins(res, fn):
    return sum(1 for s in res["arms"].values() if fn(s))


def test_criterion_pretrain_posttrain_trend(regimes):
    n = len(regimes["arms"])
    w1 = _wins(regimes, lambda r: (
        r["prepost"]["studio"]["psnr"] >= r["mixed"]["studio"]["psnr"]
        and r["prepost"]["wild"]["psnr"] >= r["mixed"]["wild"]["psnr"]))
    w2 = _wins(regimes, lambda r: min(
        ("wild_only", "studio_only", "mixed", "prepost"),
        key=lambda a: r[a]["studio"]["psnr"]) == "wild_only")
    ok = 3 * w1 >= 2 * n and 3 * w2 >= 2 * n
    report("pretrain->posttrain beats mixed; wild-only lowest on studio", ok,
           f"prepost>=mixed {w1}/{n}, wild lowest {w2}/{n}")


def test_criterion_layerwise_decay(regimes):
    n = len(regimes["arms"])
    w = _wins(regimes, lambda r: r["prepost_g0.0"]["studio"]["psnr"]
              < r["prepost"]["studio"]["psnr"])
    report("gamma=0 underperforms gamma=0.65 on studio", 3 * w >= 2 * n,
           f"{w}/{n} seeds")


def test_criterion_dual_branch(regimes):
    n = len(regimes["arms"])
    w = _wins(regimes, lambda r: r["prepost"]["studio"]["psnr"]
              >= r["single_branch"]["studio"]["psnr"])
    report("dual-branch decoder >= single branch on studio", 3 * w >= 2 * n,
           f"{w}/{n} seeds")


def test_criterion_domain_separation(regimes):
    from lca.pipeline import load_checkpoint
    n = 0
    wins = 0
    details = []
    for seed in regimes["arms"]:
        pre = load_checkpoint(CACHE / f"prepost_g0.65_s{seed}.ckpt")
        mixed = load_checkpoint(CACHE / f"mixed_s{seed}.ckpt")
        sep_pp = pca_tokens(pre, CACHE / "wild" / "manifest.jsonl",
                            CACHE / "studio" / "manifest.jsonl")["separation"]
        sep_mx = pca_tokens(mixed, CACHE / "wild" / "manifest.jsonl",
                            CACHE / "studio" / "manifest.jsonl")["separation"]
        n += 1
        wins += sep_pp < sep_mx
        details.append(f"s{seed} {sep_pp:.2f}v{sep_mx:.2f}")
    report("post-trained tokens separate domains less than mixed",
           3 * wins >= 2 * n, f"{wins}/{n} ({', '.join(details)})")


def test_criterion_deformer(regimes):
    # the corrective field needs roughly twice the regime budget: its only
    # bone-assignment signal is the few dozen garment pixels per frame, and
    # the rigidity priors converge well before the photometric anchoring does
    out = deformer_ablation(CACHE / "deformer", seed=0,
                            budget=Budget(pre_steps=1000, post_steps=0,
                                          batch_size=2))
    ratio = out["summary"]["metric_ratio"]
    gain = out["summary"]["psnr_gain_db"]
    ok = ratio <= 0.5 and gain >= 0.5
    report("embedded deformer halves garment splitting and gains PSNR", ok,
           f"metric ratio {ratio:.2f}, PSNR gain {gain:+.2f} dB")


# ---------------------------------------------------------------------------
# 8. driving-path performance
# ---------------------------------------------------------------------------

def test_criterion_drive_path(tmp_path, capsys):
    model, rig, body, face, rng = toy_setup(seed=9)
    av = build_avatar(model, body, face)
    path = tmp_path / "a.lcav"
    save_avatar(av, path)
    cam = Camera.look_at([0, 1, 2.3], [0, 1, 0], width=64, height=48,
                         fx=40, fy=40)
    before = model.encoder_layer_calls
    decode_ms = []
    for i in range(50):
        sig = DrivingSignal(theta=rng.normal(0, 0.1, rig.pose_dim),
                            expression=rng.normal(0, 0.3, 8),
                            gaze=np.zeros(6))
        _, _, t = drive_frame(av, sig, cam)
        decode_ms.append(t["pose_decode"] * 1e3)
    encoder_runs = model.encoder_layer_calls - before
    median = float(np.median(decode_ms))

    from lca.cli import main as cli_main
    bench_out = tmp_path / "bench.json"
    cli_main(["bench", "--avatar", str(path), "--frames", "10",
              "--out", str(bench_out)])
    capsys.readouterr()
    rep = json.loads(bench_out.read_text())
    ok = (encoder_runs == 0 and median < 10.0
          and rep["stages"]["pose_decode"]["median_ms"] < 10.0)
    report("drive path: no encoder, pose decode < 10 ms, bench report", ok,
           f"encoder runs {encoder_runs}, median {median:.2f} ms")


# ---------------------------------------------------------------------------
# 9. serialization
# ---------------------------------------------------------------------------

def test_criterion_serialization(tmp_path):
    model, rig, body, face, rng = toy_setup(seed=10)
    base = build_avatar(model, body, face, deformer=True)
    path = tmp_path / "a.lcav"
    exact = 0
    for i in range(1000):
        g = base.canonical
        base.canonical = GaussianSet(
            color=rng.uniform(0, 1, g.color.shape).astype(np.float32),
            position=rng.normal(0, 0.3, g.position.shape).astype(np.float32),
            opacity=rng.uniform(0, 1, g.opacity.shape).astype(np.float32),
            rotation=g.rotation, log_scale=g.log_scale)
        base.tokens = rng.normal(0, 1, base.tokens.shape).astype(np.float32)
        save_avatar(base, path)
        if load_avatar(path) == base:
            exact += 1

    corrupt_named = False
    version_named = False
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    bad = tmp_path / "bad.lcav"
    bad.write_bytes(bytes(data))
    try:
        load_avatar(bad)
    except AvatarFormatError as exc:
        corrupt_named = "section" in str(exc)
    data2 = bytearray(path.read_bytes())
    data2[4] = 99  # version byte
    bad.write_bytes(bytes(data2))
    try:
        load_avatar(bad)
    except AvatarFormatError as exc:
        version_named = "version" in str(exc)

    ok = exact == 1000 and corrupt_named and version_named
    report("1000 bit-exact round trips; corruption and version rejected", ok,
           f"{exact}/1000 exact, corruption named section: {corrupt_named}, "
           f"version named: {version_named}")
