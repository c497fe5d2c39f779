"""Procedural ground-truth generator.

Teacher avatars are themselves Gaussian avatars rendered by this package's own
rasterizer, so the training data is exactly realizable by a student of the
same capacity and every experiment has a recoverable oracle.  Two capture
modes: "studio" (multi-camera ring, clean) and "wild" (monocular, degraded).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .avatar import Camera, DrivingSignal, GaussianSet, Rig, default_rig
from .skinning import SkinWeightField, forward_kinematics
from .splat import render_np

GARMENT_FRACTION = 0.10
EXPR_DIM = 8
GAZE_DIM = 6


# ---------------------------------------------------------------------------
# teacher avatars
# ---------------------------------------------------------------------------

@dataclass
class TeacherAvatar:
    """Ground-truth avatar: canonical Gaussians + known skinning + known
    pose-delta generator, all deterministic in the seed."""

    seed: int
    rig: Rig
    canonical: GaussianSet
    skin_weights: np.ndarray          # [M,J] the teacher's own skinning
    garment_mask: np.ndarray          # [M] bool
    pose_basis: np.ndarray            # [M,3,F] linear pose-delta generator
    expr_basis: np.ndarray            # [M,3,EXPR_DIM] face-region expression basis
    face_mask: np.ndarray             # [M] bool

    @property
    def has_garment(self) -> bool:
        return bool(self.garment_mask.any())

    def signal_features(self, sig: DrivingSignal) -> np.ndarray:
        return np.concatenate([np.sin(sig.theta[6:]), sig.gaze])

    def pose_deltas(self, sig: DrivingSignal) -> np.ndarray:
        """Ground-truth per-Gaussian canonical position offsets [M,3]."""
        f = self.signal_features(sig)
        d = np.einsum("mcf,f->mc", self.pose_basis, f)
        d += np.einsum("mce,e->mc", self.expr_basis, sig.expression)
        return d

    def posed_gaussians(self, sig: DrivingSignal) -> GaussianSet:
        """Canonical + GT deltas, then the teacher's own skinning."""
        tf = forward_kinematics(self.rig, sig.theta)
        pos = self.canonical.position + self.pose_deltas(sig)
        w = self.skin_weights
        lin = np.einsum("mj,jab->mab", w, tf.rotations)
        posed = np.einsum("mab,mb->ma", lin, pos) + w @ tf.translations
        bq = w @ tf.quats
        bq /= np.linalg.norm(bq, axis=1, keepdims=True)
        q = _quat_mul_np(bq, self.canonical.rotation)
        return GaussianSet(color=self.canonical.color, position=posed.astype(np.float32),
                           opacity=self.canonical.opacity, rotation=q.astype(np.float32),
                           log_scale=self.canonical.log_scale)


def _quat_mul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a.T
    bw, bx, by, bz = b.T
    return np.stack([aw * bw - ax * bx - ay * by - az * bz,
                     aw * bx + ax * bw + ay * bz - az * by,
                     aw * by - ax * bz + ay * bw + az * bx,
                     aw * bz + ax * by - ay * bx + az * bw], axis=1)


def generate_teacher(seed: int, anchors: int = 256, k: int = 2) -> TeacherAvatar:
    """Deterministic procedural subject; ~10% of seeds get a loose garment shell."""
    rng = np.random.default_rng(seed)
    rig = default_rig(anchors, seed=seed, scale=float(1.0 + 0.08 * rng.uniform(-1, 1)))
    field_w = SkinWeightField(rig)

    base = np.repeat(rig.rest_points.astype(np.float64), k, axis=0)
    m_body = len(base)
    pos = base + rng.normal(0, 0.015, base.shape)
    face = np.repeat(rig.point_labels == 0, k)

    skin_tone = rng.uniform(0.45, 0.9, 3) * np.array([1.0, 0.85, 0.7])
    cloth = rng.uniform(0.1, 0.9, 3)
    color = np.where(face[:, None], skin_tone, cloth)
    color += rng.normal(0, 0.04, color.shape)
    opacity = rng.uniform(0.75, 0.95, m_body)
    log_scale = np.where(face[:, None], np.log(0.018), np.log(0.030))
    log_scale = log_scale + rng.normal(0, 0.1, (m_body, 3))
    quat = np.tile([1.0, 0, 0, 0], (m_body, 1))

    garment = rng.random() < GARMENT_FRACTION
    n_g = 256 if garment else 0
    if garment:
        # hem band low on the legs: the long lever arm from the hips makes
        # fixed skinning tear it visibly at the front/back seams in a wide
        # stance, while the loose radius keeps it spatially separated from
        # the leg point cloud
        phi = rng.uniform(0, 2 * np.pi, n_g)
        y = rng.uniform(0.15, 0.25, n_g) * rig.joint_positions[0, 1] / 0.95
        flare = rng.uniform(0.17, 0.19, n_g)
        gpos = np.stack([flare * np.cos(phi), y, flare * np.sin(phi)], axis=1)
        gcol = np.tile(rng.uniform(0.2, 0.95, 3), (n_g, 1))
        pos = np.concatenate([pos, gpos])
        color = np.concatenate([color, gcol])
        opacity = np.concatenate([opacity, rng.uniform(0.8, 0.95, n_g)])
        log_scale = np.concatenate([log_scale, np.full((n_g, 3), np.log(0.045))])
        quat = np.concatenate([quat, np.tile([1.0, 0, 0, 0], (n_g, 1))])
        face = np.concatenate([face, np.zeros(n_g, bool)])

    m = len(pos)
    gmask = np.zeros(m, bool)
    gmask[m_body:] = True

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        weights = field_w.weights_np(pos)
    if garment:
        # the garment follows the root almost rigidly: in a wide stance the
        # legs split apart but the shell stays coherent
        root = np.zeros(rig.num_joints)
        root[0] = 1.0
        weights[gmask] = 0.9 * root + 0.1 * weights[gmask]
        weights[gmask] /= weights[gmask].sum(axis=1, keepdims=True)

    feat = rig.pose_dim - 6 + GAZE_DIM
    pose_basis = rng.normal(0, 1.0, (m, 3, feat)) * 0.004
    expr_basis = np.where(face[:, None, None],
                          rng.normal(0, 1.0, (m, 3, EXPR_DIM)) * 0.006, 0.0)

    canonical = GaussianSet(color=np.clip(color, 0, 1).astype(np.float32),
                            position=pos.astype(np.float32),
                            opacity=opacity.astype(np.float32),
                            rotation=quat.astype(np.float32),
                            log_scale=log_scale.astype(np.float32))
    return TeacherAvatar(seed=seed, rig=rig, canonical=canonical,
                         skin_weights=weights.astype(np.float64),
                         garment_mask=gmask, pose_basis=pose_basis,
                         expr_basis=expr_basis, face_mask=face)


# ---------------------------------------------------------------------------
# signals and cameras
# ---------------------------------------------------------------------------

def sample_signal(rng: np.random.Generator, rig: Rig, magnitude: float = 0.15
                  ) -> DrivingSignal:
    theta = np.zeros(rig.pose_dim)
    theta[3:6] = [0.0, rng.uniform(-0.3, 0.3), 0.0]
    theta[6:] = rng.normal(0, magnitude, rig.pose_dim - 6)
    return DrivingSignal(theta=theta,
                         expression=rng.normal(0, 0.5, EXPR_DIM),
                         gaze=rng.uniform(-0.3, 0.3, GAZE_DIM))


def wide_stance_signal(rig: Rig, amount: float = 0.5) -> DrivingSignal:
    """Legs spread sideways: the pose that splits mis-skinned garments."""
    theta = np.zeros(rig.pose_dim)
    jl = rig.joint_names.index("l_hip")
    jr = rig.joint_names.index("r_hip")
    # negative z-rotation at the left hip (positive at the right) swings each
    # leg outward; the opposite signs cross the legs scissors-style instead
    theta[6 + 3 * jl + 2] = -amount
    theta[6 + 3 * jr + 2] = amount
    return DrivingSignal(theta=theta, expression=np.zeros(EXPR_DIM),
                         gaze=np.zeros(GAZE_DIM))


def studio_ring(count: int, rig: Rig, width: int, height: int) -> list[Camera]:
    """Evenly spaced camera ring around the subject."""
    target = np.array([0.0, rig.joint_positions[0, 1] * 1.05, 0.0])
    cams = []
    for i in range(count):
        a = 2 * np.pi * i / count
        eye = target + np.array([2.3 * np.sin(a), 0.15, 2.3 * np.cos(a)])
        cams.append(Camera.look_at(eye, target, fx=40.0, fy=40.0,
                                   width=width, height=height))
    return cams


def wild_camera(rng: np.random.Generator, rig: Rig, width: int, height: int) -> Camera:
    target = np.array([0.0, rig.joint_positions[0, 1] * 1.05, 0.0])
    target = target + rng.normal(0, 0.05, 3)
    a = rng.uniform(0, 2 * np.pi)
    r = rng.uniform(1.9, 2.9)
    h = rng.uniform(-0.1, 0.5)
    eye = target + np.array([r * np.sin(a), h, r * np.cos(a)])
    return Camera.look_at(eye, target, fx=40.0, fy=40.0, width=width, height=height)


def face_camera(rig: Rig, azimuth: float, width: int, height: int) -> Camera:
    """Close-up aimed at the known head position."""
    head = rig.joint_positions[rig.joint_names.index("head")].astype(np.float64)
    center = head + np.array([0.0, 0.1 * rig.joint_positions[0, 1] / 0.95, 0.0])
    eye = center + 0.5 * np.array([np.sin(azimuth), 0.0, np.cos(azimuth)])
    return Camera.look_at(eye, center, fx=90.0, fy=90.0, width=width, height=height)


# ---------------------------------------------------------------------------
# capture and degradation
# ---------------------------------------------------------------------------

@dataclass
class CaptureConfig:
    mode: str = "studio"              # studio | wild
    num_cameras: int = 12
    width: int = 64
    height: int = 48
    noise_sigma: float = 0.02
    blur_radius: float = 1.0
    downscale: int = 2
    exposure_jitter: float = 0.1
    pose_magnitude: float = 0.15   # std of sampled joint angles for targets

    def __post_init__(self):
        if self.mode not in ("studio", "wild"):
            raise ValueError(f"unknown capture mode {self.mode!r}")
        if self.mode == "studio":
            # studio captures are clean by definition
            self.noise_sigma = 0.0
            self.blur_radius = 0.0
            self.downscale = 1
            self.exposure_jitter = 0.0
        if self.mode == "wild":
            self.num_cameras = 1
        if not 12 <= self.num_cameras <= 24 and self.mode == "studio":
            raise ValueError("studio ring needs 12-24 cameras")


def degrade(img: np.ndarray, cfg: CaptureConfig, rng: np.random.Generator) -> np.ndarray:
    """Phone-video artifacts: exposure jitter, blur, downscale, sensor noise."""
    out = img.astype(np.float64)
    if cfg.exposure_jitter > 0:
        out = out * (1.0 + rng.uniform(-cfg.exposure_jitter, cfg.exposure_jitter))
    if cfg.blur_radius > 0:
        out = ndimage.gaussian_filter(out, sigma=(cfg.blur_radius, cfg.blur_radius, 0))
    d = cfg.downscale
    if d > 1:
        h, w = out.shape[:2]
        out = out.reshape(h // d, d, w // d, d, -1).mean(axis=(1, 3))
        out = np.repeat(np.repeat(out, d, axis=0), d, axis=1)
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0, cfg.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


class CameraRejected(RuntimeError):
    pass


def render_view(teacher: TeacherAvatar, sig: DrivingSignal, cam: Camera
                ) -> tuple[np.ndarray, np.ndarray]:
    g = teacher.posed_gaussians(sig)
    rgb, alpha = render_np(g.color, g.position, g.opacity, g.rotation, g.scale,
                           cam, cam.height, cam.width)
    return rgb, alpha


def render_sample(teacher: TeacherAvatar, cfg: CaptureConfig, sig: DrivingSignal,
                  cam: Camera, rng: np.random.Generator, retries: int = 20
                  ) -> dict:
    """One target frame: GT render, wild degradation if configured, alpha mask.

    A camera that barely sees the subject is resampled (wild mode) up to
    ``retries`` times, then rejected.
    """
    for attempt in range(retries + 1):
        rgb, alpha = render_view(teacher, sig, cam)
        mask = alpha > 0.5
        if mask.sum() >= 0.02 * mask.size:
            img = degrade(rgb, cfg, rng) if cfg.mode == "wild" else rgb
            return {"image": img.astype(np.float32), "mask": mask,
                    "camera": cam, "signal": sig}
        if cfg.mode != "wild" or attempt == retries:
            raise CameraRejected("camera does not see the subject")
        cam = wild_camera(rng, teacher.rig, cfg.width, cfg.height)
    raise CameraRejected("unreachable")


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def _save_png(path: Path, img: np.ndarray):
    arr = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def _cam_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist()}


def _cam_from(d: dict) -> Camera:
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  width=d["width"], height=d["height"],
                  rotation=np.array(d["rotation"]), translation=np.array(d["translation"]))


def build_dataset(out_dir: str | Path, num_subjects: int, frames_per_subject: int,
                  cfg: CaptureConfig, seed: int, test_fraction: float = 0.2,
                  garment_only: bool = False) -> Path:
    """Render a dataset to disk; returns the manifest path.

    The manifest is line-delimited JSON, one record per subject, listing
    conditioning frames (rest pose, body + face pairs) and target frames.
    The train/test split is by subject: the last ceil(fraction*n) subjects are
    held out.
    """
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    n_test = int(np.ceil(test_fraction * num_subjects)) if test_fraction > 0 else 0
    records = []
    candidate = 0
    for si in range(num_subjects):
        # deterministic scan: garment_only keeps skipping seeds until a
        # garment-wearing teacher turns up
        while True:
            subj_seed = seed * 1_000_003 + candidate
            candidate += 1
            teacher = generate_teacher(subj_seed)
            if not garment_only or teacher.has_garment:
                break
        rng = np.random.default_rng(subj_seed + 7)
        split = "test" if si >= num_subjects - n_test else "train"
        sid = f"{cfg.mode[0]}{subj_seed}"
        rest = DrivingSignal.rest(teacher.rig, EXPR_DIM)

        if cfg.mode == "studio":
            ring = studio_ring(cfg.num_cameras, teacher.rig, cfg.width, cfg.height)
            cond_cams = [ring[i * len(ring) // 4] for i in range(4)]
        else:
            cond_cams = [wild_camera(rng, teacher.rig, cfg.width, cfg.height)
                         for _ in range(4)]
        cond = []
        for ci, cam in enumerate(cond_cams):
            s = render_sample(teacher, cfg, rest, cam, rng)
            fcam = face_camera(teacher.rig, azimuth=2 * np.pi * ci / 4,
                               width=cfg.width, height=cfg.height)
            frgb, _ = render_view(teacher, rest, fcam)
            if cfg.mode == "wild":
                frgb = degrade(frgb, cfg, rng)
            bp = img_dir / f"{sid}_c{ci}_body.png"
            fp = img_dir / f"{sid}_c{ci}_face.png"
            _save_png(bp, s["image"])
            _save_png(fp, frgb)
            cond.append({"body": bp.name, "face": fp.name,
                         "camera": _cam_dict(s["camera"])})

        targets = []
        for fi in range(frames_per_subject):
            sig = sample_signal(rng, teacher.rig, magnitude=cfg.pose_magnitude)
            if cfg.mode == "studio":
                cam = ring[int(rng.integers(len(ring)))]
            else:
                cam = wild_camera(rng, teacher.rig, cfg.width, cfg.height)
            s = render_sample(teacher, cfg, sig, cam, rng)
            ip = img_dir / f"{sid}_t{fi}.png"
            mp = img_dir / f"{sid}_t{fi}_mask.png"
            _save_png(ip, s["image"])
            _save_png(mp, s["mask"].astype(np.float64))
            targets.append({"image": ip.name, "mask": mp.name,
                            "camera": _cam_dict(s["camera"]),
                            "signal": s["signal"].concat().tolist()})
        records.append({"subject": sid, "seed": subj_seed, "split": split,
                        "mode": cfg.mode, "garment": teacher.has_garment,
                        "cond": cond, "targets": targets})

    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as f:
        f.write(json.dumps({"type": "header", "mode": cfg.mode, "seed": seed,
                            "num_subjects": num_subjects,
                            "frames_per_subject": frames_per_subject,
                            "width": cfg.width, "height": cfg.height}) + "\n")
        for r in records:
            f.write(json.dumps(r) + "\n")
    return manifest


@dataclass
class Subject:
    subject_id: str
    seed: int
    split: str
    mode: str
    garment: bool
    cond_body: np.ndarray     # [4,H,W,3]
    cond_face: np.ndarray     # [4,H,W,3]
    cond_cams: list
    targets: list             # dicts: image, mask, camera, signal


def load_manifest(manifest_path: str | Path) -> tuple[dict, list[Subject]]:
    """Read a dataset back into memory (images are small at desk scale)."""
    path = Path(manifest_path)
    img_dir = path.parent / "images"
    header = None
    subjects = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if rec.get("type") == "header":
                header = rec
                continue
            body = np.stack([_load_png(img_dir / c["body"]) for c in rec["cond"]])
            face = np.stack([_load_png(img_dir / c["face"]) for c in rec["cond"]])
            cams = [_cam_from(c["camera"]) for c in rec["cond"]]
            targets = []
            for t in rec["targets"]:
                targets.append({
                    "image": _load_png(img_dir / t["image"]),
                    "mask": _load_png(img_dir / t["mask"]) > 0.5,
                    "camera": _cam_from(t["camera"]),
                    "signal": np.array(t["signal"]),
                })
            subjects.append(Subject(subject_id=rec["subject"], seed=rec["seed"],
                                    split=rec["split"], mode=rec["mode"],
                                    garment=rec["garment"], cond_body=body,
                                    cond_face=face, cond_cams=cams, targets=targets))
    if header is None:
        raise ValueError(f"manifest {path} has no header record")
    return header, subjects
