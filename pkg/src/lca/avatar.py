"""Avatar data model: Gaussian sets, driving signals, kinematic rig, cameras,
and the persisted binary avatar file.

The binary format is little-endian: magic ``LCAV``, u32 version, u32 section
count, then per section a 4-byte tag, u64 payload length, the payload, and a
trailing CRC32 of that payload.  Round trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

AVATAR_MAGIC = b"LCAV"
AVATAR_VERSION = 1
SECTION_TAGS = (b"RIG ", b"GAUS", b"TOKS", b"POSW", b"SKNW", b"NODE")


class AvatarFormatError(Exception):
    pass


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole intrinsics plus a world-to-view rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray   # [3,3], world-to-view
    translation: np.ndarray  # [3]

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-5) or np.linalg.det(self.rotation) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")

    def world_to_view(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), fx=70.0, fy=70.0,
                width=64, height=48) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])  # rows: view axes (x right, y down, z forward)
        return Camera(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height,
                      rotation=rot, translation=-rot @ eye)


@dataclass
class Rig:
    """Kinematic tree with template anchor points.

    Pose vector layout: 3 global translation, 3 global rotation (axis-angle),
    then 3 axis-angle values per joint, root included.
    """

    parents: np.ndarray          # [J] int32, parents[0] == -1
    joint_positions: np.ndarray  # [J,3] rest-pose world positions
    joint_names: list[str]
    rest_points: np.ndarray      # [G,3] template anchor points
    point_labels: np.ndarray     # [G] uint8: 0 face, 1 body
    bone_tips: np.ndarray | None = None  # [J,3] far end of each joint's bone segment

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int32)
        self.joint_positions = np.asarray(self.joint_positions, dtype=np.float32)
        self.rest_points = np.asarray(self.rest_points, dtype=np.float32)
        self.point_labels = np.asarray(self.point_labels, dtype=np.uint8)
        if self.parents[0] != -1 or np.sum(self.parents == -1) != 1:
            raise ValueError("rig must have exactly one root at index 0")
        if np.any(self.parents[1:] >= np.arange(1, len(self.parents))):
            raise ValueError("parent index must precede child index")
        if self.bone_tips is None:
            self.bone_tips = self._derive_bone_tips()
        self.bone_tips = np.asarray(self.bone_tips, dtype=np.float32)

    def _derive_bone_tips(self) -> np.ndarray:
        # each joint's bone runs toward the mean of its children; leaves
        # extend past the joint along the parent->joint direction
        tips = np.zeros_like(self.joint_positions)
        for j in range(self.num_joints):
            children = np.nonzero(self.parents == j)[0]
            if len(children):
                tips[j] = self.joint_positions[children].mean(axis=0)
            elif self.parents[j] >= 0:
                d = self.joint_positions[j] - self.joint_positions[self.parents[j]]
                n = np.linalg.norm(d)
                tips[j] = self.joint_positions[j] + (d / n * 0.25 if n > 1e-6 else 0.0)
            else:
                tips[j] = self.joint_positions[j]
        return tips

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def pose_dim(self) -> int:
        return 3 * self.num_joints + 6

    def face_mask(self) -> np.ndarray:
        return self.point_labels == 0


def default_rig(anchor_count: int = 256, seed: int = 0, scale: float = 1.0) -> Rig:
    """Toy humanoid: pelvis root, spine, head, two arms, two hips.

    Half the anchor points sample the head (face region), half the body.
    """
    rng = np.random.default_rng(seed)
    s = scale
    names = ["pelvis", "spine", "head", "l_shoulder", "l_elbow",
             "r_shoulder", "r_elbow", "l_hip", "r_hip"]
    parents = np.array([-1, 0, 1, 1, 3, 1, 5, 0, 0], dtype=np.int32)
    joints = np.array([
        [0.0, 0.95, 0.0],    # pelvis
        [0.0, 1.35, 0.0],    # spine (chest)
        [0.0, 1.62, 0.0],    # head base
        [-0.20, 1.45, 0.0],  # l_shoulder
        [-0.48, 1.45, 0.0],  # l_elbow
        [0.20, 1.45, 0.0],   # r_shoulder
        [0.48, 1.45, 0.0],   # r_elbow
        [-0.12, 0.85, 0.0],  # l_hip
        [0.12, 0.85, 0.0],   # r_hip
    ], dtype=np.float32) * s

    g_face = anchor_count // 2
    g_body = anchor_count - g_face
    head_center = np.array([0.0, 1.72, 0.0]) * s
    face = head_center + 0.10 * s * _unit_sphere(rng, g_face)
    # body points scattered along the limb segments
    segs = [(0, 1), (1, 2), (3, 4), (5, 6), (7, 0), (8, 0),
            (7, 7), (8, 8)]  # last two: legs hang below the hips
    body = []
    for i in range(g_body):
        a, b = segs[i % len(segs)]
        t = rng.random()
        if a == b:  # leg: extend downward from the hip
            p = joints[a] + np.array([0.0, -0.75, 0.0]) * s * t
        else:
            p = joints[a] * (1 - t) + joints[b] * t
        p = p + 0.05 * s * rng.standard_normal(3)
        body.append(p)
    points = np.concatenate([face, np.asarray(body)]).astype(np.float32)
    labels = np.concatenate([np.zeros(g_face, np.uint8), np.ones(g_body, np.uint8)])
    tips = np.array([
        [0.0, 1.35, 0.0],    # pelvis -> spine
        [0.0, 1.62, 0.0],    # spine -> head base
        [0.0, 1.85, 0.0],    # head -> crown
        [-0.48, 1.45, 0.0],  # l_shoulder -> l_elbow
        [-0.75, 1.45, 0.0],  # l_elbow -> l_wrist
        [0.48, 1.45, 0.0],   # r_shoulder -> r_elbow
        [0.75, 1.45, 0.0],   # r_elbow -> r_wrist
        [-0.12, 0.10, 0.0],  # l_hip -> l_foot
        [0.12, 0.10, 0.0],   # r_hip -> r_foot
    ], dtype=np.float32) * s
    return Rig(parents=parents, joint_positions=joints, joint_names=names,
               rest_points=points, point_labels=labels, bone_tips=tips)


def _unit_sphere(rng, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class DrivingSignal:
    """Per-frame animation input: body pose, expression code, gaze."""

    theta: np.ndarray
    expression: np.ndarray
    gaze: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float32)
        self.expression = np.asarray(self.expression, dtype=np.float32)
        self.gaze = np.asarray(self.gaze, dtype=np.float32)
        if self.gaze.shape != (6,):
            raise ValueError("gaze must have length 6")
        for name, arr in (("theta", self.theta), ("expression", self.expression),
                          ("gaze", self.gaze)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")

    @staticmethod
    def rest(rig: Rig, expression_dim: int = 8) -> "DrivingSignal":
        return DrivingSignal(np.zeros(rig.pose_dim, np.float32),
                             np.zeros(expression_dim, np.float32),
                             np.zeros(6, np.float32))

    def concat(self) -> np.ndarray:
        return np.concatenate([self.theta, self.expression, self.gaze])


@dataclass
class GaussianSet:
    """Per-Gaussian attributes; scale is kept in log-space internally."""

    color: np.ndarray      # [M,3] in [0,1]
    position: np.ndarray   # [M,3] meters
    opacity: np.ndarray    # [M] in [0,1]
    rotation: np.ndarray   # [M,4] unit quaternions (w,x,y,z)
    log_scale: np.ndarray  # [M,3]

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float32)
        self.position = np.asarray(self.position, dtype=np.float32)
        self.opacity = np.asarray(self.opacity, dtype=np.float32)
        self.rotation = np.asarray(self.rotation, dtype=np.float32)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float32)

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.color.copy(), self.position.copy(),
                           self.opacity.copy(), self.rotation.copy(),
                           self.log_scale.copy())


@dataclass
class GaussianDeltas:
    """Pose/expression-dependent attribute offsets.  There is no opacity delta."""

    d_color: np.ndarray
    d_position: np.ndarray
    d_rotation: np.ndarray
    d_log_scale: np.ndarray

    @staticmethod
    def zero(count: int) -> "GaussianDeltas":
        return GaussianDeltas(np.zeros((count, 3), np.float32),
                              np.zeros((count, 3), np.float32),
                              np.zeros((count, 4), np.float32),
                              np.zeros((count, 3), np.float32))


def apply_deltas(canonical: GaussianSet, deltas: GaussianDeltas) -> GaussianSet:
    """Frame-ready attributes: canonical plus correctives, opacity untouched."""
    m = canonical.count
    for arr in (deltas.d_color, deltas.d_position, deltas.d_rotation, deltas.d_log_scale):
        if arr.shape[0] != m:
            raise ValueError(f"delta count {arr.shape[0]} != canonical count {m}")
    if np.any(deltas.d_rotation):
        q = canonical.rotation + deltas.d_rotation
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        q = np.where(norm > 1e-6, q / np.maximum(norm, 1e-12), canonical.rotation)
    else:
        # all-zero rotation deltas must reproduce the canonical set bit-exactly,
        # so skip the renormalization (which perturbs the last float32 ulp)
        q = canonical.rotation
    return GaussianSet(
        color=np.clip(canonical.color + deltas.d_color, 0.0, 1.0),
        position=canonical.position + deltas.d_position,
        opacity=canonical.opacity,            # frozen during animation
        rotation=q.astype(np.float32),
        log_scale=canonical.log_scale + deltas.d_log_scale,
    )


def validate(g: GaussianSet) -> list[str]:
    """Empty list iff all GaussianSet invariants hold; violations name index and field."""
    out: list[str] = []
    qn = np.linalg.norm(g.rotation, axis=1)
    for i in np.nonzero(np.abs(qn - 1.0) > 1e-5)[0]:
        out.append(f"gaussian {i}: quaternion norm {qn[i]:.6g}")
    for i in np.nonzero((g.opacity < 0) | (g.opacity > 1))[0]:
        out.append(f"gaussian {i}: opacity {g.opacity[i]:.6g} outside [0,1]")
    for i in np.nonzero(np.any((g.color < 0) | (g.color > 1), axis=1))[0]:
        out.append(f"gaussian {i}: color outside [0,1]")
    for name, arr in (("position", g.position), ("log_scale", g.log_scale),
                      ("color", g.color), ("opacity", g.opacity), ("rotation", g.rotation)):
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.nonzero(bad.reshape(arr.shape[0], -1).any(axis=1))[0][0])
            out.append(f"gaussian {idx}: non-finite {name}")
    return out


# ---------------------------------------------------------------------------
# array (de)serialization helpers
# ---------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<u4"): 2,
                np.dtype("<i4"): 3, np.dtype("u1"): 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<H", len(arrays)))
    for key in sorted(arrays):
        # asarray, not ascontiguousarray: the latter promotes 0-d to shape (1,)
        arr = np.asarray(arrays[key])
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32)
        kb = key.encode()
        buf.write(struct.pack("<B", len(kb)))
        buf.write(kb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    return buf.getvalue()


def unpack_arrays(payload: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(payload)
    (count,) = struct.unpack("<H", buf.read(2))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack("<B", buf.read(1))
        key = buf.read(klen).decode()
        code, ndim = struct.unpack("<BB", buf.read(2))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        raw = buf.read(n * dtype.itemsize)
        out[key] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# avatar file
# ---------------------------------------------------------------------------

@dataclass
class AvatarFile:
    """The persisted output of one-time avatar creation."""

    rig: Rig
    canonical: GaussianSet
    tokens: np.ndarray                      # [G,D] encoded geometric tokens
    pose_weights: dict[str, np.ndarray]     # pose-decoder parameters + meta arrays
    skin_weights: dict[str, np.ndarray] | None = None
    node_graph: dict[str, np.ndarray] | None = None
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, AvatarFile):
            return NotImplemented
        return _sections_of(self) == _sections_of(other)


def _rig_arrays(rig: Rig) -> dict[str, np.ndarray]:
    names = "\x00".join(rig.joint_names).encode()
    return {"parents": rig.parents, "joint_positions": rig.joint_positions,
            "joint_names": np.frombuffer(names, dtype=np.uint8).copy(),
            "rest_points": rig.rest_points, "point_labels": rig.point_labels,
            "bone_tips": rig.bone_tips}


def _rig_from_arrays(a: dict[str, np.ndarray]) -> Rig:
    names = a["joint_names"].tobytes().decode().split("\x00")
    return Rig(parents=a["parents"], joint_positions=a["joint_positions"],
               joint_names=names, rest_points=a["rest_points"],
               point_labels=a["point_labels"], bone_tips=a.get("bone_tips"))


def _gaussian_arrays(g: GaussianSet) -> dict[str, np.ndarray]:
    return {"color": g.color, "position": g.position, "opacity": g.opacity,
            "rotation": g.rotation, "log_scale": g.log_scale}


def _sections_of(a: AvatarFile) -> list[tuple[bytes, bytes]]:
    gaus = dict(_gaussian_arrays(a.canonical))
    gaus.update({f"meta_{k}": v for k, v in a.meta.items()})
    sections = [
        (b"RIG ", pack_arrays(_rig_arrays(a.rig))),
        (b"GAUS", pack_arrays(gaus)),
        (b"TOKS", pack_arrays({"tokens": a.tokens})),
        (b"POSW", pack_arrays(a.pose_weights)),
    ]
    if a.skin_weights is not None:
        sections.append((b"SKNW", pack_arrays(a.skin_weights)))
    if a.node_graph is not None:
        sections.append((b"NODE", pack_arrays(a.node_graph)))
    return sections


def save_avatar(a: AvatarFile, path):
    sections = _sections_of(a)
    with open(path, "wb") as f:
        f.write(AVATAR_MAGIC)
        f.write(struct.pack("<II", AVATAR_VERSION, len(sections)))
        for tag, payload in sections:
            f.write(tag)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload)))


def load_avatar(path) -> AvatarFile:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != AVATAR_MAGIC:
        raise AvatarFormatError(f"bad magic {data[:4]!r}, expected {AVATAR_MAGIC!r}")
    version, count = struct.unpack("<II", data[4:12])
    if version != AVATAR_VERSION:
        raise AvatarFormatError(
            f"unsupported avatar version {version}, this build reads version {AVATAR_VERSION}")
    off = 12
    sections: dict[bytes, bytes] = {}
    for _ in range(count):
        if off + 12 > len(data):
            raise AvatarFormatError("truncated file: section header cut short")
        tag = data[off:off + 4]
        (length,) = struct.unpack("<Q", data[off + 4:off + 12])
        off += 12
        if off + length + 4 > len(data):
            raise AvatarFormatError(f"truncated file in section {tag.decode().strip()!r}")
        payload = data[off:off + length]
        off += length
        (crc,) = struct.unpack("<I", data[off:off + 4])
        off += 4
        if zlib.crc32(payload) != crc:
            raise AvatarFormatError(f"checksum failure in section {tag.decode().strip()!r}")
        sections[tag] = payload

    for required in (b"RIG ", b"GAUS", b"TOKS", b"POSW"):
        if required not in sections:
            raise AvatarFormatError(f"missing section {required.decode().strip()!r}")
    gaus = unpack_arrays(sections[b"GAUS"])
    meta = {k[5:]: v for k, v in gaus.items() if k.startswith("meta_")}
    gaus = {k: v for k, v in gaus.items() if not k.startswith("meta_")}
    return AvatarFile(
        rig=_rig_from_arrays(unpack_arrays(sections[b"RIG "])),
        canonical=GaussianSet(**gaus),
        tokens=unpack_arrays(sections[b"TOKS"])["tokens"],
        pose_weights=unpack_arrays(sections[b"POSW"]),
        skin_weights=unpack_arrays(sections[b"SKNW"]) if b"SKNW" in sections else None,
        node_graph=unpack_arrays(sections[b"NODE"]) if b"NODE" in sections else None,
        meta=meta,
    )
