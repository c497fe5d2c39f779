"""Forward kinematics, linear blend skinning of Gaussians, and the two-level
node-based deformation module with learnable skinning correctives.

All deformation math is written against the autodiff engine so gradients flow
to Gaussian attributes and corrective heads; passing plain arrays (wrapped in
non-grad tensors) gives the fast inference path on the same code.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import engine as eng
from .avatar import Rig
from .engine import Tensor

FIELD_EPS = 1e-4          # softens inverse-squared-distance weights near bones
FAR_DISTANCE = 2.0        # meters; beyond this from every bone we fall back


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a single axis-angle vector."""
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3, dtype=v.dtype)
    axis = v / angle
    kx, ky, kz = axis
    k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]], dtype=v.dtype)
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w,x,y,z), w >= 0."""
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2
        q = np.zeros(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product of quaternion batches [*,4] (w,x,y,z)."""
    aw, ax, ay, az = (a[..., 0], a[..., 1], a[..., 2], a[..., 3])
    bw, bx, by, bz = (b[..., 0], b[..., 1], b[..., 2], b[..., 3])
    return eng.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_normalize(q: Tensor, eps: float = 1e-12) -> Tensor:
    n = eng.sqrt(eng.sum_(q * q, axis=-1, keepdims=True) + eps)
    return q * (n ** -1.0)


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

@dataclass
class PosedTransforms:
    """Per-joint skinning transforms: x_posed = R_j @ x + t_j.

    Identity at the rest pose.  ``quats`` are the rotation quaternions,
    hemisphere-aligned to the root's.
    """

    rotations: np.ndarray     # [J,3,3]
    translations: np.ndarray  # [J,3]
    quats: np.ndarray         # [J,4]

    def check_rigid(self, tol: float = 1e-5) -> bool:
        eye = np.eye(3)
        return all(np.allclose(r.T @ r, eye, atol=tol) for r in self.rotations)


def forward_kinematics(rig: Rig, theta: np.ndarray) -> PosedTransforms:
    """Compose local joint rotations down the tree, with a 6-DoF root offset.

    theta layout: [3 global translation | 3 global axis-angle | 3 per joint].
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (rig.pose_dim,):
        raise ValueError(f"theta length {theta.shape} != rig pose dim {rig.pose_dim}")
    jnum = rig.num_joints
    pos = rig.joint_positions.astype(np.float64)
    g_trans = theta[:3]
    g_rot = axis_angle_to_matrix(theta[3:6])
    local = theta[6:].reshape(jnum, 3)

    world_r = np.zeros((jnum, 3, 3))
    world_t = np.zeros((jnum, 3))
    # global rigid motion rotates about the rest root position, then translates
    root_pivot = pos[0]
    for j in range(jnum):
        r_local = axis_angle_to_matrix(local[j])
        if rig.parents[j] < 0:
            world_r[j] = g_rot @ r_local
            world_t[j] = g_rot @ (pos[j] - root_pivot) + root_pivot + g_trans
        else:
            p = rig.parents[j]
            world_r[j] = world_r[p] @ r_local
            world_t[j] = world_r[p] @ (pos[j] - pos[p]) + world_t[p]
    # skinning transform: undo the rest position, apply the posed frame
    skin_r = world_r.copy()
    skin_t = world_t - np.einsum("jab,jb->ja", world_r, pos)
    quats = np.stack([matrix_to_quat(r) for r in skin_r])
    ref = quats[0]
    flip = (quats @ ref) < 0
    quats[flip] *= -1
    return PosedTransforms(rotations=skin_r, translations=skin_t, quats=quats)


# ---------------------------------------------------------------------------
# skinning weight field
# ---------------------------------------------------------------------------

class SkinWeightField:
    """Inverse-squared distance to bone segments, normalized per query point."""

    def __init__(self, rig: Rig):
        self.rig = rig
        self.seg_a = rig.joint_positions.astype(np.float64)
        self.seg_b = rig.bone_tips.astype(np.float64)

    def weights(self, points: Tensor) -> Tensor:
        """Differentiable per-joint weights [M,J] for query points [M,3]."""
        dtype = eng.current_dtype()
        a = Tensor(self.seg_a.astype(dtype))       # [J,3]
        ab = Tensor((self.seg_b - self.seg_a).astype(dtype))
        ab_len2 = np.maximum(np.sum((self.seg_b - self.seg_a) ** 2, axis=1), 1e-12)
        x = eng.reshape(points, (points.shape[0], 1, 3))
        xa = x - a                                  # [M,J,3]
        t = eng.clip(eng.sum_(xa * ab, axis=-1) * Tensor(1.0 / ab_len2.astype(dtype)),
                     0.0, 1.0)                      # [M,J]
        closest = a + eng.reshape(t, (t.shape[0], t.shape[1], 1)) * ab
        d2 = eng.sum_((x - closest) ** 2.0, axis=-1)
        raw = (d2 + FIELD_EPS) ** -1.0
        return raw * (eng.sum_(raw, axis=-1, keepdims=True) ** -1.0)

    def weights_np(self, points: np.ndarray) -> np.ndarray:
        """Plain-array evaluation with a nearest-joint fallback for far points."""
        w = self.weights(Tensor(np.asarray(points, dtype=eng.current_dtype()))).numpy()
        d2 = self._dist2(points)
        far = d2.min(axis=1) > FAR_DISTANCE ** 2
        if far.any():
            warnings.warn(f"{int(far.sum())} query points far outside rig bounds; "
                          "using nearest-joint fallback")
            w = w.copy()
            w[far] = 0.0
            w[far, d2[far].argmin(axis=1)] = 1.0
        return w

    def _dist2(self, points: np.ndarray) -> np.ndarray:
        x = np.asarray(points, dtype=np.float64)[:, None, :]
        ab = self.seg_b - self.seg_a
        t = np.clip(np.sum((x - self.seg_a) * ab, axis=-1)
                    / np.maximum(np.sum(ab * ab, axis=1), 1e-12), 0.0, 1.0)
        closest = self.seg_a + t[..., None] * ab
        return np.sum((x - closest) ** 2, axis=-1)


# ---------------------------------------------------------------------------
# linear blend skinning
# ---------------------------------------------------------------------------

def blend_transforms(weights: Tensor, tf: PosedTransforms) -> tuple[Tensor, Tensor]:
    """Affine blend of joint transforms: [*,J] weights -> ([*,3,3], [*,3])."""
    dtype = eng.current_dtype()
    rot = Tensor(tf.rotations.reshape(1, -1, 9).astype(dtype))
    trn = Tensor(tf.translations.reshape(1, -1, 3).astype(dtype))
    w = eng.reshape(weights, (weights.shape[0], weights.shape[1], 1))
    lin = eng.reshape(eng.sum_(w * rot, axis=1), (weights.shape[0], 3, 3))
    off = eng.sum_(w * trn, axis=1)
    return lin, off


def blend_quats(weights: Tensor, quats: np.ndarray) -> Tensor:
    """QLERP: normalized weighted sum of hemisphere-aligned joint quaternions."""
    q = Tensor(quats.astype(eng.current_dtype()))
    blended = eng.matmul(weights, q)
    return quat_normalize(blended)


def lbs_points(points: Tensor, quats: Tensor, theta: np.ndarray,
               field: SkinWeightField, weights: Tensor | None = None
               ) -> tuple[Tensor, Tensor]:
    """Skin positions and rotations to the pose.

    Position: weight-blended affine joint transforms applied to each point.
    Rotation: QLERP of joint rotations composed onto the canonical quaternion.
    """
    tf = forward_kinematics(field.rig, theta)
    if weights is None:
        weights = field.weights(points)
    lin, off = blend_transforms(weights, tf)
    posed = eng.reshape(eng.matmul(lin, eng.reshape(points, (points.shape[0], 3, 1))),
                        (points.shape[0], 3)) + off
    posed_q = quat_normalize(quat_mul(blend_quats(weights, tf.quats), quats))
    return posed, posed_q


# ---------------------------------------------------------------------------
# node graph / embedded deformation
# ---------------------------------------------------------------------------

@dataclass
class NodeGraph:
    """Coarse deformation nodes with 4-NN embedded weights over the Gaussians."""

    node_gauss_idx: np.ndarray   # [N] index into the canonical Gaussian set
    node_token_idx: np.ndarray   # [N] index into the geometric tokens
    node_positions: np.ndarray   # [N,3]
    base_weights: np.ndarray     # [N,J] skin field evaluated at the nodes
    corrected_weights: np.ndarray  # [N,J]; equals base until a corrective is applied
    nn_idx: np.ndarray           # [M,4] node indices per Gaussian
    nn_weights: np.ndarray       # [M,4] normalized inverse-distance weights

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"node_gauss_idx": self.node_gauss_idx.astype(np.uint32),
                "node_token_idx": self.node_token_idx.astype(np.uint32),
                "node_positions": self.node_positions.astype(np.float32),
                "base_weights": self.base_weights.astype(np.float32),
                "corrected_weights": self.corrected_weights.astype(np.float32),
                "nn_idx": self.nn_idx.astype(np.uint32),
                "nn_weights": self.nn_weights.astype(np.float32)}

    @staticmethod
    def from_arrays(a: dict[str, np.ndarray]) -> "NodeGraph":
        return NodeGraph(a["node_gauss_idx"].astype(np.int64),
                         a["node_token_idx"].astype(np.int64),
                         a["node_positions"], a["base_weights"],
                         a["corrected_weights"],
                         a["nn_idx"].astype(np.int64), a["nn_weights"])


def build_node_graph(positions: np.ndarray, field: SkinWeightField,
                     n_node: int, gauss_per_token: int = 1) -> NodeGraph:
    """Deterministic uniform-stride node subsample plus 4-NN embedded weights.

    Ties in the neighbor search break toward the lower node index, so the
    result is bit-deterministic for fixed inputs.
    """
    m = positions.shape[0]
    if n_node < 4:
        raise ValueError("embedded deformation needs at least 4 nodes")
    if n_node > m:
        raise ValueError(f"n_node {n_node} exceeds Gaussian count {m}")
    idx = (np.arange(n_node, dtype=np.int64) * m) // n_node
    nodes = positions[idx].astype(np.float64)
    d = np.linalg.norm(positions[:, None, :].astype(np.float64) - nodes[None], axis=-1)
    # lexicographic (distance, node index) selection for deterministic ties
    order = np.lexsort((np.broadcast_to(np.arange(n_node), d.shape), d), axis=1)
    nn = order[:, :4]
    nd = np.take_along_axis(d, nn, axis=1)
    w = np.zeros_like(nd)
    coincident = nd[:, 0] < 1e-9
    w[coincident, 0] = 1.0
    inv = 1.0 / np.maximum(nd[~coincident], 1e-12)
    w[~coincident] = inv / inv.sum(axis=1, keepdims=True)
    base = field.weights_np(nodes)
    return NodeGraph(node_gauss_idx=idx, node_token_idx=idx // max(gauss_per_token, 1),
                     node_positions=nodes.astype(np.float32),
                     base_weights=base.astype(np.float32),
                     corrected_weights=base.astype(np.float32),
                     nn_idx=nn.astype(np.int64), nn_weights=w.astype(np.float32))


def corrected_node_weights(base_weights: Tensor, corrective: Tensor) -> Tensor:
    """W' = renormalize(W ∘ exp(c)): multiplicative corrective in log space.

    Zero corrective is an exact identity, rows always stay positive and sum
    to one, and the output varies smoothly in the corrective — an additive
    clamp-and-renormalize can flip a row between joints when the clamped sum
    approaches zero, which shows up as neighboring points skinned to opposite
    limbs."""
    raw = base_weights * eng.exp(corrective)
    total = eng.sum_(raw, axis=-1, keepdims=True)
    return raw * (total ** -1.0)


def interp_node_values(graph: NodeGraph, values: Tensor) -> Tensor:
    """Interpolate per-node values [N,C] to per-Gaussian values [M,C] through
    the graph's 4-NN inverse-distance weights.

    Used to turn per-node skinning correctives into a spatially smooth
    per-Gaussian corrective field: each Gaussian blends the deltas of its
    four neighbor nodes, so corrections vary continuously over the surface
    instead of jumping between neighboring Gaussians."""
    m = graph.nn_idx.shape[0]
    w = Tensor(graph.nn_weights.astype(eng.current_dtype()))      # [M,4]
    gathered = values[graph.nn_idx]                               # [M,4,C]
    return eng.sum_(eng.reshape(w, (m, 4, 1)) * gathered, axis=1)


def node_transforms(corrected: Tensor, tf: PosedTransforms) -> tuple[Tensor, Tensor, Tensor]:
    """Rigid-ish transform per node: LBS blend of joint transforms under W'."""
    lin, off = blend_transforms(corrected, tf)
    quats = blend_quats(corrected, tf.quats)
    return lin, off, quats


def embedded_deform(node_lin: Tensor, node_off: Tensor, node_quats: Tensor,
                    graph: NodeGraph, points: Tensor, quats: Tensor | None = None
                    ) -> tuple[Tensor, Tensor | None]:
    """Deform Gaussians through their 4 neighbor nodes' blended transforms."""
    m = points.shape[0]
    if graph.nn_idx.shape[0] != m:
        raise ValueError(f"node graph built for {graph.nn_idx.shape[0]} Gaussians, got {m}")
    dtype = eng.current_dtype()
    w = Tensor(graph.nn_weights.astype(dtype))          # [M,4]
    lin_g = node_lin[graph.nn_idx]                      # [M,4,3,3]
    off_g = node_off[graph.nn_idx]                      # [M,4,3]
    p = eng.reshape(points, (m, 1, 3, 1))
    moved = eng.reshape(eng.matmul(lin_g, p), (m, 4, 3)) + off_g
    posed = eng.sum_(eng.reshape(w, (m, 4, 1)) * moved, axis=1)
    posed_q = None
    if quats is not None:
        nq = node_quats[graph.nn_idx]                   # [M,4,4]
        blended = quat_normalize(eng.sum_(eng.reshape(w, (m, 4, 1)) * nq, axis=1))
        posed_q = quat_normalize(quat_mul(blended, quats))
    return posed, posed_q


def knn_edges(positions: np.ndarray, k: int = 6) -> np.ndarray:
    """Undirected k-NN edge set [E,2] over canonical positions."""
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k + 1)
    src = np.repeat(np.arange(positions.shape[0]), k)
    dst = idx[:, 1:].reshape(-1)
    edges = np.sort(np.stack([src, dst], axis=1), axis=1)
    return np.unique(edges, axis=0)


def arap_loss(deformed: Tensor, canonical: np.ndarray, edges: np.ndarray,
              edge_weights: np.ndarray | None = None,
              tolerance: float = 0.0) -> Tensor:
    """Relative-strain penalty over the canonical neighbor graph.

    Each edge contributes (max(|len - rest| / rest - tolerance, 0))^2:
    normalizing by the rest length makes the penalty scale-free, so a short
    edge stretched to many times its rest length dominates the mean instead
    of drowning in the sea of long, mildly-strained edges.  That is exactly
    the tearing regime — surface neighbors bound to different bones — which
    an absolute-length penalty under-weights by orders of magnitude.  Rest
    lengths are floored at half the median so near-coincident pairs cannot
    blow up the strain.

    ``tolerance`` is a strain dead-zone: linear-blend skinning legitimately
    stretches material near bending joints (strains up to ~0.5 at strong
    poses), and penalizing that pushes weights toward single-bone bindings
    that tear elsewhere.  A tear is an order of magnitude above it, so a
    hinge at the articulation level keeps the prior silent on healthy skin
    and loud on splits.

    With ``edge_weights`` the penalty becomes a weighted mean, letting the
    caller focus the prior on a subset of the material (the denominator is
    floored at 1 so a subject with no weighted edges contributes ~0 instead
    of amplified noise)."""
    if edges.size == 0:
        raise ValueError("empty edge set")
    e0, e1 = edges[:, 0], edges[:, 1]
    d = deformed[e0] - deformed[e1]
    lengths = eng.sqrt(eng.sum_(d * d, axis=-1) + 1e-12)
    rest = np.sqrt(np.sum((canonical[e0] - canonical[e1]) ** 2, axis=-1) + 1e-12)
    denom = np.maximum(rest, 0.5 * float(np.median(rest)))
    diff = (lengths - Tensor(rest.astype(eng.current_dtype()))) \
        * Tensor((1.0 / denom).astype(eng.current_dtype()))
    if tolerance > 0.0:
        diff = eng.maximum(eng.abs_(diff) - tolerance, 0.0)
    sq = diff * diff
    if edge_weights is None:
        return eng.mean(sq)
    w = edge_weights.astype(eng.current_dtype())
    return eng.sum_(sq * Tensor(w)) * (1.0 / max(float(w.sum()), 1.0))

