"""Glue between the network, skinning, and rasterizer.

Two paths share the avatar semantics:

* the differentiable training/creation path (engine tensors end-to-end), and
* the plain-numpy driving path used for animation and serving, which loads a
  persisted avatar and never touches the encoder.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .avatar import AvatarFile, Camera, DrivingSignal, GaussianSet, Rig
from .engine import Tensor
from .net import EncoderConfig, LCAModel
from .skinning import (SkinWeightField, arap_loss, build_node_graph,
                       corrected_node_weights, forward_kinematics,
                       interp_node_values, knn_edges, lbs_points, quat_mul,
                       quat_normalize)
from .splat import render, render_np


# ---------------------------------------------------------------------------
# differentiable creation/training path
# ---------------------------------------------------------------------------

@dataclass
class ForwardOut:
    tokens: Tensor
    cano: dict            # canonical attribute tensors
    img_cano: Tensor      # [H,W,4] canonical branch skinned to the pose
    img_pose: Tensor      # [H,W,4] with pose-dependent deltas
    posed_positions: Tensor
    arap: Tensor | None
    skw: Tensor | None
    smooth: Tensor | None


def posed_attributes(model: LCAModel, tokens: Tensor, cano: dict,
                     signal_vec: np.ndarray) -> dict:
    """Canonical attributes plus decoded deltas (or the fused single branch)."""
    if model.config.single_branch:
        return model.decode_single(tokens, signal_vec)
    d = model.decode_pose(tokens, signal_vec)
    return {
        "color": eng.clip(cano["color"] + d["d_color"], 0.0, 1.0),
        "position": cano["position"] + d["d_position"],
        "opacity": cano["opacity"],   # opacity is never animated
        "quat": quat_normalize(cano["quat"] + d["d_quat"]),
        "log_scale": cano["log_scale"] + d["d_log_scale"],
    }


def _skin(attrs: dict, field: SkinWeightField, theta: np.ndarray,
          deform: tuple | None, bind: Tensor) -> tuple[Tensor, Tensor]:
    """Pose positions+rotations by LBS, or through the node graph if given.

    Weights always bind at the canonical positions ``bind``: letting the
    pose-dependent position deltas re-bind the weights every frame would tie
    the skinning to the pose head's behavior far outside its training
    range — a saturated delta can push a point onto a different bone's
    domain and fling it across the body."""
    base = field.weights(bind)
    if deform is not None:
        # Corrective-field skinning: the node graph parameterizes a smooth
        # per-Gaussian weight delta (node correctives interpolated through
        # the 4-NN embedded weights) on top of the analytic field.  Where
        # the correctives are zero this reduces exactly to the fixed-field
        # path, so the deformer can only improve on it.
        graph, corrective = deform
        base = corrected_node_weights(base, interp_node_values(graph, corrective))
    return lbs_points(attrs["position"], attrs["quat"], theta, field,
                      weights=base)


def render_branch(attrs: dict, field: SkinWeightField, theta: np.ndarray,
                  cam: Camera, deform: tuple | None, bind: Tensor
                  ) -> tuple[Tensor, Tensor]:
    pos, q = _skin(attrs, field, theta, deform, bind)
    img = render(attrs["color"], pos, attrs["opacity"], q,
                 eng.exp(attrs["log_scale"]), cam, cam.height, cam.width)
    return img, pos


def forward_sample(model: LCAModel, field: SkinWeightField,
                   cond_body: np.ndarray, cond_face: np.ndarray,
                   signal_vec: np.ndarray, cam: Camera,
                   deformer: bool = False, tokens: Tensor | None = None
                   ) -> ForwardOut:
    """Encode conditioning views and render both supervision branches."""
    if tokens is None:
        tokens = model.encode(cond_body, cond_face)
    rig = model.rig
    pose_dim = rig.pose_dim
    theta = signal_vec[:pose_dim]
    rest_theta = np.zeros(pose_dim)

    if model.config.single_branch:
        cano = model.decode_single(tokens, np.zeros_like(signal_vec))
    else:
        cano = model.decode_canonical(tokens)
    full = posed_attributes(model, tokens, cano, signal_vec)

    deform = None
    arap = skw = smooth = None
    if deformer:
        graph = build_node_graph(cano["position"].numpy(), field,
                                 model.config.n_node,
                                 model.config.gaussians_per_token)
        corrective = model.decode_skin(tokens[graph.node_token_idx])
        deform = (graph, corrective)
        skw = eng.mean(eng.abs_(corrective))
        # smoothness prior on the corrective field: the skin head is token-
        # wise and carries no spatial prior of its own, so without this term
        # neighboring nodes can learn very different weight deltas and the
        # skinned surface shears between them
        ne = knn_edges(graph.node_positions, k=4)
        smooth = eng.mean((corrective[ne[:, 0]] - corrective[ne[:, 1]]) ** 2.0)

    img_cano, _ = render_branch(cano, field, theta, cam, deform,
                                cano["position"])
    img_pose, posed_pos = render_branch(full, field, theta, cam, deform,
                                        cano["position"])

    if deformer:
        # rigidity prior on a geometry-detached copy: gradients flow only
        # into the corrective field, so the prior teaches the skinning
        # weights to preserve local structure without also shrinking the
        # canonical geometry or fighting the pose head.  It skins the
        # CANONICAL positions (no pose-dependent deltas): per-splat deltas
        # of ±0.05 on centimeter-scale edges masquerade as strains of 3+,
        # and that noise floor was two orders of magnitude above the actual
        # skinning-tear signal the prior exists to suppress
        edges = knn_edges(cano["position"].numpy(), k=6)
        pos_det = Tensor(cano["position"].numpy())
        quat_det = Tensor(cano["quat"].numpy())
        bind_det = Tensor(cano["position"].numpy())
        corr_det = corrected_node_weights(field.weights(bind_det),
                                          interp_node_values(graph, corrective))
        posed_det, _ = lbs_points(pos_det, quat_det, theta, field,
                                  weights=corr_det)
        arap = arap_loss(posed_det, pos_det.numpy(), edges, tolerance=0.5)
    return ForwardOut(tokens=tokens, cano=cano, img_cano=img_cano,
                      img_pose=img_pose, posed_positions=posed_pos,
                      arap=arap, skw=skw, smooth=smooth)


# ---------------------------------------------------------------------------
# avatar creation
# ---------------------------------------------------------------------------

def build_avatar(model: LCAModel, cond_body: np.ndarray, cond_face: np.ndarray,
                 deformer: bool = False, record_attention: bool = False
                 ) -> AvatarFile:
    """One-time initialization: encode once, decode canonical Gaussians, and
    persist everything the driving path needs (pose head included)."""
    n = cond_body.shape[0]
    if not 1 <= n <= model.config.n_max:
        raise ValueError(f"need 1-{model.config.n_max} conditioning image pairs, got {n}")
    prev = model.record_attention
    model.record_attention = record_attention
    try:
        tokens = model.encode(cond_body, cond_face)
    finally:
        model.record_attention = prev
    cfg = model.config
    if cfg.single_branch:
        cano = model.decode_single(tokens, np.zeros(cfg.signal_dim))
    else:
        cano = model.decode_canonical(tokens)
    gaussians = GaussianSet(color=cano["color"].numpy(),
                            position=cano["position"].numpy(),
                            opacity=cano["opacity"].numpy(),
                            rotation=cano["quat"].numpy(),
                            log_scale=cano["log_scale"].numpy())

    head = "head.single" if cfg.single_branch else "head.pose"
    pose_weights = {k: v.data for k, v in model.params.items()
                    if k.startswith(head)}
    pose_weights = dict(pose_weights)
    pose_weights["stats.signal_mean"] = model.signal_mean
    pose_weights["stats.signal_std"] = model.signal_std
    pose_weights["scalar.k"] = np.array([cfg.gaussians_per_token], np.int64)
    pose_weights["scalar.single_branch"] = np.array([int(cfg.single_branch)], np.int64)

    field = SkinWeightField(model.rig)
    skin_weights = {"weights": field.weights_np(gaussians.position).astype(np.float32)}

    node_graph = None
    if deformer:
        graph = build_node_graph(gaussians.position, field, cfg.n_node,
                                 cfg.gaussians_per_token)
        corrective = model.decode_skin(tokens[graph.node_token_idx])
        base = Tensor(graph.base_weights.astype(eng.current_dtype()))
        corrected = corrected_node_weights(base, corrective)
        graph.corrected_weights = corrected.numpy().astype(np.float32)
        node_graph = graph.to_arrays()
        # per-Gaussian log-space corrective field, pre-interpolated for the
        # driving path
        node_graph["weight_log_deltas"] = (
            interp_node_values(graph, corrective).numpy().astype(np.float32))

    meta = {}
    if record_attention and model.last_attention is not None:
        meta["attention"] = model.last_attention.astype(np.float32)
        meta["n_views"] = np.array([n], np.int64)
    return AvatarFile(rig=model.rig, canonical=gaussians, tokens=tokens.numpy(),
                      pose_weights=pose_weights, skin_weights=skin_weights,
                      node_graph=node_graph, meta=meta)


# ---------------------------------------------------------------------------
# numpy driving path (no encoder, no autodiff graph)
# ---------------------------------------------------------------------------

def _mlp_np(arrays: dict, head: str, x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    for i in range(4):
        x = x @ arrays[f"{head}.fc{i}.w"] + arrays[f"{head}.fc{i}.b"]
        if i < 3:
            x = np.where(x > 0, x, slope * x)
    return x


def pose_decode_np(avatar: AvatarFile, signal_vec: np.ndarray) -> dict:
    """Pose-head forward on plain arrays; mirrors the training decoder exactly."""
    pw = avatar.pose_weights
    k = int(pw["scalar.k"][0])
    mean, std = pw["stats.signal_mean"], pw["stats.signal_std"]
    sig = ((signal_vec - mean) / np.maximum(std, 1e-6)).astype(np.float32)
    tokens = avatar.tokens
    x = np.concatenate([tokens, np.broadcast_to(sig, (len(tokens), len(sig)))], axis=1)
    if int(pw["scalar.single_branch"][0]):
        raw = _mlp_np(pw, "head.single", x.astype(np.float32)).reshape(-1, 14)
        anchors = np.repeat(avatar.rig.rest_points, k, axis=0)
        q = raw[:, 7:11] + np.array([1.0, 0, 0, 0], np.float32)
        q /= np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        return {"mode": "single",
                "color": 1 / (1 + np.exp(-raw[:, 0:3])),
                "position": np.tanh(raw[:, 3:6]) * 0.5 + anchors,
                "opacity": 1 / (1 + np.exp(-raw[:, 6])),
                "quat": q,
                "log_scale": np.tanh(raw[:, 11:14]) * 2.0 + np.float32(np.log(0.01))}
    raw = _mlp_np(pw, "head.pose", x.astype(np.float32)).reshape(-1, 13)
    raw = np.tanh(raw)
    return {"mode": "delta",
            "d_color": raw[:, 0:3] * np.float32(0.1),
            "d_position": raw[:, 3:6] * np.float32(0.05),
            "d_quat": raw[:, 6:10] * np.float32(0.1),
            "d_log_scale": raw[:, 10:13] * np.float32(0.1)}


def _quat_mul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a.T
    bw, bx, by, bz = b.T
    return np.stack([aw * bw - ax * bx - ay * by - az * bz,
                     aw * bx + ax * bw + ay * bz - az * by,
                     aw * by - ax * bz + ay * bw + az * bx,
                     aw * bz + ax * by - ay * bx + az * bw], axis=1)


def pose_gaussians_np(avatar: AvatarFile, signal: DrivingSignal) -> GaussianSet:
    """Apply decoded deltas and skinning on plain arrays (the per-frame path)."""
    d = pose_decode_np(avatar, signal.concat())
    return _skin_decoded_np(avatar, d, signal.theta)


def _skin_decoded_np(avatar: AvatarFile, d: dict, theta: np.ndarray) -> GaussianSet:
    cano = avatar.canonical
    if d["mode"] == "single":
        color, pos = d["color"], d["position"]
        opac, quat, ls = d["opacity"], d["quat"], d["log_scale"]
    else:
        color = np.clip(cano.color + d["d_color"], 0, 1)
        pos = cano.position + d["d_position"]
        opac = cano.opacity
        q = cano.rotation + d["d_quat"]
        n = np.linalg.norm(q, axis=1, keepdims=True)
        quat = np.where(n > 1e-6, q / np.maximum(n, 1e-12), cano.rotation)
        ls = cano.log_scale + d["d_log_scale"]

    tf = forward_kinematics(avatar.rig, theta)
    field = SkinWeightField(avatar.rig)
    # weights bind at the canonical positions (see _skin): the pose deltas
    # move the splats but never re-bind them to different bones
    w = field.weights_np(cano.position)
    if avatar.node_graph is not None:
        # corrective-field skinning: scale the analytic field by the persisted
        # per-Gaussian log-space deltas and renormalize (mirrors
        # corrected_node_weights on the training path)
        raw = w * np.exp(avatar.node_graph["weight_log_deltas"].astype(w.dtype))
        w = raw / raw.sum(axis=1, keepdims=True)
    lin = np.einsum("mj,jab->mab", w, tf.rotations)
    posed = np.einsum("mab,mb->ma", lin, pos.astype(np.float64)) + w @ tf.translations
    bq = w @ tf.quats
    bq /= np.linalg.norm(bq, axis=1, keepdims=True)
    rq = _quat_mul_np(bq, quat.astype(np.float64))
    rq /= np.linalg.norm(rq, axis=1, keepdims=True)
    return GaussianSet(color=color, position=posed.astype(np.float32),
                       opacity=opac, rotation=rq.astype(np.float32), log_scale=ls)


def drive_frame(avatar: AvatarFile, signal: DrivingSignal, cam: Camera
                ) -> tuple[np.ndarray, np.ndarray, dict]:
    """One driven frame: decode -> skin -> render, with per-stage timings (s)."""
    t0 = time.perf_counter()
    g = pose_gaussians_np(avatar, signal)
    t1 = time.perf_counter()
    rgb, alpha = render_np(g.color, g.position, g.opacity, g.rotation, g.scale,
                           cam, cam.height, cam.width)
    t2 = time.perf_counter()
    return rgb, alpha, {"pose_decode": t1 - t0, "render": t2 - t1}


def bench_render(avatar: AvatarFile, signals: list[DrivingSignal], cam: Camera
                 ) -> dict:
    """Per-stage timing report for the driving path.

    Stages: pose_decode (head MLP), skinning (FK + LBS/node deformation),
    projection (EWA), rasterization (tile compositing).  Median and p95 in
    milliseconds per stage; empty report for an empty sequence.
    """
    from .splat import project_scene, rasterize_forward

    if not signals:
        return {"frames": 0, "stages": {}}
    times: dict[str, list[float]] = {k: [] for k in
                                     ("pose_decode", "skinning", "projection",
                                      "rasterization")}
    for sig in signals:
        t0 = time.perf_counter()
        d = pose_decode_np(avatar, sig.concat())
        t1 = time.perf_counter()
        g = _skin_decoded_np(avatar, d, sig.theta)
        t2 = time.perf_counter()
        dt = np.float32
        scene = project_scene(g.color.astype(dt), g.position.astype(dt),
                              g.opacity.astype(dt), g.rotation.astype(dt),
                              g.scale.astype(dt), cam)
        t3 = time.perf_counter()
        rasterize_forward(scene, cam.height, cam.width)
        t4 = time.perf_counter()
        for k, v in zip(times, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            times[k].append(v * 1e3)
    stages = {k: {"median_ms": float(np.median(v)),
                  "p95_ms": float(np.percentile(v, 95))}
              for k, v in times.items()}
    total = sum(s["median_ms"] for s in stages.values())
    return {"frames": len(signals), "stages": stages,
            "fps_estimate": float(1e3 / total) if total > 0 else 0.0}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LCAC"
CKPT_VERSION = 1


def save_checkpoint(path, model: LCAModel, extra: dict | None = None):
    import struct
    import zlib
    from dataclasses import asdict
    from .avatar import pack_arrays, _rig_arrays
    arrays = dict(model.state_arrays())
    cfg_json = json.dumps(asdict(model.config)).encode()
    arrays["config.json"] = np.frombuffer(cfg_json, dtype=np.uint8).copy()
    for k, v in _rig_arrays(model.rig).items():
        arrays[f"rig.{k}"] = v
    for k, v in (extra or {}).items():
        arrays[f"extra.{k}"] = np.asarray(v)
    payload = pack_arrays(arrays)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, 1))
        f.write(b"MODL")
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> LCAModel:
    import struct
    import zlib
    from .avatar import AvatarFormatError, unpack_arrays, _rig_from_arrays
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise AvatarFormatError(f"bad checkpoint magic {data[:4]!r}")
    version, _ = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise AvatarFormatError(f"unsupported checkpoint version {version}")
    tag = data[12:16]
    (length,) = struct.unpack("<Q", data[16:24])
    payload = data[24:24 + length]
    (crc,) = struct.unpack("<I", data[24 + length:28 + length])
    if zlib.crc32(payload) != crc:
        raise AvatarFormatError(f"checksum failure in section {tag.decode().strip()!r}")
    arrays = unpack_arrays(payload)
    cfg = EncoderConfig(**json.loads(arrays.pop("config.json").tobytes().decode()))
    rig = _rig_from_arrays({k[4:]: v for k, v in arrays.items()
                            if k.startswith("rig.")})
    model = LCAModel(cfg, rig, seed=0)
    model.load_state({k: v for k, v in arrays.items()
                      if not k.startswith(("rig.", "extra."))})
    return model
