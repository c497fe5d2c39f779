"""Encoder and decoder heads: tokenization, stacked image/geometric/multimodal
attention layers, and the three MLP heads (canonical, pose-dependent,
skin-corrective).

The model holds one flat, name-keyed parameter dict; names carry the layer
index so the trainer can assign layer-wise learning rates, and checkpoints are
just the packed dict.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as eng
from .avatar import Rig
from .engine import Tensor

MASK_NEG = -1e30  # exp() underflows to exactly 0 after softmax


@dataclass
class EncoderConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    anchors: int = 256          # G geometric tokens
    gaussians_per_token: int = 2  # k
    n_max: int = 4
    patch: int = 16
    img_w: int = 64
    img_h: int = 48
    theta_dim: int = 33
    expr_dim: int = 8
    gaze_dim: int = 6
    registry_tokens: int = 4
    head_hidden: int = 128
    n_node: int = 64
    single_branch: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("token dim must be divisible by head count")
        if self.dim // self.heads < 8:
            raise ValueError("per-head dimension must be at least 8")

    @property
    def patches(self) -> int:
        return (self.img_w // self.patch) * (self.img_h // self.patch)

    @property
    def signal_dim(self) -> int:
        return self.theta_dim + self.expr_dim + self.gaze_dim

    @staticmethod
    def toy(**kw) -> "EncoderConfig":
        return EncoderConfig(**kw)

    @staticmethod
    def full_scale(**kw) -> "EncoderConfig":
        base = dict(layers=8, dim=1024, heads=16, anchors=8192,
                    gaussians_per_token=8, img_w=1024, img_h=768, n_node=512)
        base.update(kw)
        return EncoderConfig(**base)


def fourier_pe(points: np.ndarray, bands: int = 6) -> np.ndarray:
    """Fixed Fourier features: raw xyz plus sin/cos at 2^0..2^(bands-1)."""
    x = np.asarray(points, dtype=np.float64)
    freqs = 2.0 ** np.arange(bands)
    ang = x[:, None, :] * freqs[None, :, None]     # [G,bands,3]
    out = np.concatenate([x, np.sin(ang).reshape(len(x), -1),
                          np.cos(ang).reshape(len(x), -1)], axis=1)
    return out  # [G, 3 + 6*bands]


def rope_angles(coords: np.ndarray, head_dim: int, base: float = 100.0) -> np.ndarray:
    """Per-token rotation angles for 2D rotary encoding.

    The head dimension is split in half: the first half rotates with the x
    patch coordinate, the second with y.  Returns [T, head_dim/2] angles.
    """
    per_axis = head_dim // 2
    npairs = per_axis // 2
    inv = base ** (-np.arange(npairs) / npairs)
    ax = coords[:, 0:1] * inv[None]
    ay = coords[:, 1:2] * inv[None]
    return np.concatenate([ax, ay], axis=1)  # [T, head_dim/2]


def _rotate_pairs(x: Tensor) -> Tensor:
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    s = eng.stack([-x2, x1], axis=-1)
    return eng.reshape(s, x.shape)


def apply_rope(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate head-split features by per-token angles; [.., T, hd]."""
    cos = np.cos(angles)
    sin = np.sin(angles)
    cs = Tensor(np.repeat(cos, 2, axis=-1).astype(eng.current_dtype()))
    sn = Tensor(np.repeat(sin, 2, axis=-1).astype(eng.current_dtype()))
    return x * cs + _rotate_pairs(x) * sn


class LCAModel:
    """Encoder plus decoder heads over a flat parameter dict."""

    def __init__(self, config: EncoderConfig, rig: Rig, seed: int = 0):
        if not np.all(np.diff(rig.point_labels.astype(int)) >= 0):
            raise ValueError("rig anchor points must be ordered face-first")
        self.config = config
        self.rig = rig
        self.params: dict[str, Tensor] = {}
        self.signal_mean = np.zeros(config.signal_dim, np.float32)
        self.signal_std = np.ones(config.signal_dim, np.float32)
        self.encoder_layer_calls = 0
        self.record_attention = False
        self.last_attention: np.ndarray | None = None
        self._init_params(seed)

    # -- parameters ----------------------------------------------------------
    def _add(self, name: str, arr: np.ndarray) -> Tensor:
        t = eng.parameter(arr.astype(eng.current_dtype()), name=name)
        self.params[name] = t
        return t

    def _linear(self, rng, name: str, din: int, dout: int, zero: bool = False):
        w = np.zeros((din, dout)) if zero else rng.normal(0, 0.02, (din, dout))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(dout))

    def _ln(self, name: str, dim: int):
        self._add(f"{name}.g", np.ones(dim))
        self._add(f"{name}.b", np.zeros(dim))

    def _attn_block(self, rng, name: str, dim: int):
        self._ln(f"{name}.ln1", dim)
        for p in ("wq", "wk", "wv", "wo"):
            self._linear(rng, f"{name}.{p}", dim, dim)
        self._ln(f"{name}.ln2", dim)
        self._linear(rng, f"{name}.mlp1", dim, 4 * dim)
        self._linear(rng, f"{name}.mlp2", 4 * dim, dim)

    def _head(self, rng, name: str, din: int, dout: int, zero_final: bool):
        h = self.config.head_hidden
        self._linear(rng, f"{name}.fc0", din, h)
        self._linear(rng, f"{name}.fc1", h, h)
        self._linear(rng, f"{name}.fc2", h, h)
        self._linear(rng, f"{name}.fc3", h, dout, zero=zero_final)

    def _init_params(self, seed: int):
        cfg = self.config
        rng = np.random.default_rng(seed)
        d = cfg.dim
        self._linear(rng, "embed.patch", cfg.patch * cfg.patch * 3, d)
        self._linear(rng, "embed.geo", 39, d)
        self._add("embed.registry", rng.normal(0, 0.02, (cfg.registry_tokens, d)))
        for l in range(cfg.layers):
            self._attn_block(rng, f"enc.{l}.img", d)
            self._attn_block(rng, f"enc.{l}.geo", d)
            self._attn_block(rng, f"enc.{l}.mm", d)
            self._linear(rng, f"enc.{l}.global", d, d)
        k = cfg.gaussians_per_token
        if cfg.single_branch:
            self._head(rng, "head.single", d + cfg.signal_dim, k * 14, zero_final=False)
        else:
            self._head(rng, "head.cano", d, k * 14, zero_final=False)
            self._head(rng, "head.pose", d + cfg.signal_dim, k * 13, zero_final=True)
        self._head(rng, "head.skin", d, self.rig.num_joints, zero_final=True)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out["stats.signal_mean"] = self.signal_mean
        out["stats.signal_std"] = self.signal_std
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        self.signal_mean = arrays.get("stats.signal_mean", self.signal_mean)
        self.signal_std = arrays.get("stats.signal_std", self.signal_std)
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint missing parameter {k}")
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = arrays[k].astype(t.data.dtype)

    def layer_of(self, name: str) -> int | None:
        """Encoder layer index for layer-wise decay; None for decoder heads."""
        if name.startswith("enc."):
            return int(name.split(".")[1])
        if name.startswith("embed."):
            return -1  # embedders decay one step below layer 0
        return None   # heads keep the base rate

    # -- building blocks -----------------------------------------------------
    def _lin(self, name: str, x: Tensor) -> Tensor:
        return eng.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _layernorm(self, name: str, x: Tensor) -> Tensor:
        return eng.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _split_heads(self, x: Tensor) -> Tensor:
        h = self.config.heads
        t, d = x.shape[-2], x.shape[-1]
        lead = x.shape[:-2]
        x = eng.reshape(x, lead + (t, h, d // h))
        return eng.swapaxes(x, -2, -3)  # [.., h, t, hd]

    def _merge_heads(self, x: Tensor) -> Tensor:
        x = eng.swapaxes(x, -2, -3)
        lead = x.shape[:-2]
        return eng.reshape(x, lead + (x.shape[-2] * x.shape[-1],))

    def _attention(self, name: str, x: Tensor, rope: np.ndarray | None = None,
                   extra_kv: Tensor | None = None, mask: np.ndarray | None = None,
                   record: bool = False) -> Tensor:
        """Pre-norm self-attention + MLP block with residuals.

        ``extra_kv`` rows join keys/values only; ``mask`` is an additive
        [Tq,Tk] bias over the self keys (extra rows are never masked).
        """
        cfg = self.config
        hd = cfg.dim // cfg.heads
        normed = self._layernorm(f"{name}.ln1", x)
        q = self._split_heads(self._lin(f"{name}.wq", normed))
        k = self._split_heads(self._lin(f"{name}.wk", normed))
        v = self._split_heads(self._lin(f"{name}.wv", normed))
        if rope is not None:
            ang = rope_angles(rope, hd)
            q = apply_rope(q, ang)
            k = apply_rope(k, ang)
        if extra_kv is not None:
            ek = self._split_heads(self._lin(f"{name}.wk", extra_kv))
            ev = self._split_heads(self._lin(f"{name}.wv", extra_kv))
            k = eng.concat([k, ek], axis=-2)
            v = eng.concat([v, ev], axis=-2)
        logits = eng.matmul(q, eng.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
        if mask is not None:
            pad = np.zeros((mask.shape[0], k.shape[-2] - mask.shape[1]))
            full = np.concatenate([mask, pad], axis=1).astype(eng.current_dtype())
            logits = logits + Tensor(full)
        probs = eng.softmax(logits, axis=-1)
        if record and self.record_attention:
            p = probs.numpy()
            self.last_attention = p.mean(axis=tuple(range(p.ndim - 2)))
        out = self._merge_heads(eng.matmul(probs, v))
        x = x + self._lin(f"{name}.wo", out)
        h = self._lin(f"{name}.mlp2", eng.gelu(self._lin(f"{name}.mlp1",
                                                         self._layernorm(f"{name}.ln2", x))))
        return x + h

    # -- tokenization --------------------------------------------------------
    def patch_embed(self, images: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """[N,H,W,3] images -> ([N,P,D] tokens, [P,2] patch grid coordinates)."""
        cfg = self.config
        n, h, w, _ = images.shape
        if h % cfg.patch or w % cfg.patch:
            raise ValueError(f"resolution {w}x{h} not divisible by patch {cfg.patch}")
        gh, gw = h // cfg.patch, w // cfg.patch
        patches = images.reshape(n, gh, cfg.patch, gw, cfg.patch, 3)
        patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(n, gh * gw, -1)
        tokens = self._lin("embed.patch", Tensor(patches.astype(eng.current_dtype())))
        ys, xs = np.mgrid[0:gh, 0:gw]
        coords = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        return tokens, coords

    def geo_tokens(self) -> Tensor:
        pe = fourier_pe(self.rig.rest_points).astype(eng.current_dtype())
        return self._lin("embed.geo", Tensor(pe))

    # -- encoder -------------------------------------------------------------
    def encode(self, body_images: np.ndarray, face_images: np.ndarray) -> Tensor:
        """Full encoder pass: N view pairs -> final geometric tokens [G,D]."""
        cfg = self.config
        n = body_images.shape[0]
        if not 1 <= n <= cfg.n_max:
            raise ValueError(f"view count {n} outside [1, {cfg.n_max}]")
        body, coords = self.patch_embed(body_images)
        face, fcoords = self.patch_embed(face_images)
        gs = self.geo_tokens()
        face_count = int(np.sum(self.rig.point_labels == 0))
        for l in range(cfg.layers):
            body, face, gs = self._layer(l, body, face, gs, coords, fcoords,
                                         face_count, record=(l == cfg.layers - 1))
        return gs

    def _layer(self, l: int, body: Tensor, face: Tensor, gs: Tensor,
               coords: np.ndarray, fcoords: np.ndarray, face_count: int,
               record: bool):
        cfg = self.config
        self.encoder_layer_calls += 1
        body = self._image_attention(l, body, coords)
        face = self._image_attention(l, face, fcoords)
        gs = self._attention(f"enc.{l}.geo", gs)

        n, p, d = body.shape
        body_flat = eng.reshape(body, (n * p, d))
        face_flat = eng.reshape(face, (n * p, d))
        pooled = eng.mean(body_flat, axis=0, keepdims=True)
        t_global = self._lin(f"enc.{l}.global", pooled)

        gs_face = gs[:face_count]
        gs_body = gs[face_count:]
        # stage 1: face geometry <-> face image tokens
        s1 = eng.concat([gs_face, face_flat], axis=0)
        s1 = self._attention(f"enc.{l}.mm", s1, extra_kv=t_global)
        gs_face = s1[:face_count]
        face = eng.reshape(s1[face_count:], (n, p, d))
        # stage 2: all geometry <-> body image tokens, face-geo queries
        # masked from body-image keys
        s2 = eng.concat([gs_face, gs_body, body_flat], axis=0)
        tq = s2.shape[0]
        mask = np.zeros((tq, tq))
        mask[:face_count, face_count + gs_body.shape[0]:] = MASK_NEG
        s2 = self._attention(f"enc.{l}.mm", s2, extra_kv=t_global, mask=mask,
                             record=record)
        gs = s2[:face_count + gs_body.shape[0]]
        body = eng.reshape(s2[face_count + gs_body.shape[0]:], (n, p, d))
        return body, face, gs

    def _image_attention(self, l: int, tokens: Tensor, coords: np.ndarray) -> Tensor:
        """Per-view self-attention with registry tokens and 2D rotary positions."""
        cfg = self.config
        n, p, d = tokens.shape
        reg = eng.reshape(self.params["embed.registry"], (1, cfg.registry_tokens, d))
        reg = eng.concat([reg] * n, axis=0)
        x = eng.concat([tokens, reg], axis=1)
        rope = np.concatenate([coords, np.zeros((cfg.registry_tokens, 2))], axis=0)
        x = self._attention(f"enc.{l}.img", x, rope=rope)
        return x[:, :p]

    # -- decoders ------------------------------------------------------------
    def _run_head(self, name: str, x: Tensor) -> Tensor:
        h = eng.leaky_relu(self._lin(f"{name}.fc0", x))
        h = eng.leaky_relu(self._lin(f"{name}.fc1", h))
        h = eng.leaky_relu(self._lin(f"{name}.fc2", h))
        return self._lin(f"{name}.fc3", h)

    def _attrs_from_raw(self, raw: Tensor, with_opacity: bool) -> dict[str, Tensor]:
        cfg = self.config
        k = cfg.gaussians_per_token
        g = raw.shape[0]
        width = 14 if with_opacity else 13
        raw = eng.reshape(raw, (g * k, width))
        anchors = np.repeat(self.rig.rest_points.astype(eng.current_dtype()), k, axis=0)
        out = {
            "color": eng.sigmoid(raw[:, 0:3]),
            "position": eng.tanh(raw[:, 3:6]) * 0.5 + Tensor(anchors),
        }
        i = 6
        if with_opacity:
            out["opacity"] = eng.sigmoid(raw[:, 6])
            i = 7
        quat = raw[:, i:i + 4] + Tensor(np.array([1.0, 0, 0, 0],
                                                 dtype=eng.current_dtype()))
        from .skinning import quat_normalize
        out["quat"] = quat_normalize(quat)
        out["log_scale"] = eng.tanh(raw[:, i + 4:i + 7]) * 2.0 + float(np.log(0.01))
        return out

    def decode_canonical(self, gs_tokens: Tensor) -> dict[str, Tensor]:
        """Per token, k canonical Gaussians; positions are anchor offsets."""
        return self._attrs_from_raw(self._run_head("head.cano", gs_tokens), True)

    def normalize_signal(self, signal: np.ndarray) -> np.ndarray:
        return (signal - self.signal_mean) / np.maximum(self.signal_std, 1e-6)

    def _cond_tokens(self, gs_tokens: Tensor, signal: np.ndarray) -> Tensor:
        cfg = self.config
        if signal.shape != (cfg.signal_dim,):
            raise ValueError(f"driving signal length {signal.shape} != {cfg.signal_dim}")
        sig = self.normalize_signal(signal).astype(eng.current_dtype())
        g = gs_tokens.shape[0]
        cond = Tensor(np.broadcast_to(sig, (g, cfg.signal_dim)).copy())
        return eng.concat([gs_tokens, cond], axis=1)

    def decode_pose(self, gs_tokens: Tensor, signal: np.ndarray) -> dict[str, Tensor]:
        """Attribute deltas conditioned on (pose, expression, gaze); no opacity channel."""
        cfg = self.config
        k = cfg.gaussians_per_token
        raw = self._run_head("head.pose", self._cond_tokens(gs_tokens, signal))
        raw = eng.reshape(raw, (gs_tokens.shape[0] * k, 13))
        # Bounded deltas: tanh keeps runaway head outputs from pushing splats
        # through the camera plane during training while staying near-linear
        # around zero.  The position bound is deliberately tight — large
        # enough for genuine pose-dependent appearance, small enough that the
        # head cannot stand in for skinning.
        raw = eng.tanh(raw)
        return {
            "d_color": raw[:, 0:3] * 0.1,
            "d_position": raw[:, 3:6] * 0.05,
            "d_quat": raw[:, 6:10] * 0.1,
            "d_log_scale": raw[:, 10:13] * 0.1,
        }

    def decode_single(self, gs_tokens: Tensor, signal: np.ndarray) -> dict[str, Tensor]:
        """Fused single-branch variant: posed attributes straight from tokens+signal."""
        raw = self._run_head("head.single", self._cond_tokens(gs_tokens, signal))
        return self._attrs_from_raw(raw, True)

    def decode_skin(self, node_tokens: Tensor) -> Tensor:
        """Per-node log-space skinning weight correctives [N_node, J].

        Bounded to ±8 so the downstream exp cannot overflow; the bound still
        allows a ~3000x relative boost of any joint's weight.  The pre-tanh
        scaling keeps the map near-linear over the whole useful range — a
        plain tanh(x)*8 saturates (and stops learning) once |x| passes ~2,
        which the head reaches early in training.

        The output is mean-centered per node: adding a constant across all
        joints of one node cancels in the downstream renormalization, so
        that direction is pure gauge — centering stops the head from
        drifting along it and keeps the sparsity/smoothness penalties acting
        on differences that matter."""
        raw = self._run_head("head.skin", node_tokens)
        c = eng.tanh(raw * 0.125) * 8.0
        return c - eng.mean(c, axis=-1, keepdims=True)

    # -- diagnostics ---------------------------------------------------------
    def attention_heatmap(self, token_index: int, view_index: int) -> np.ndarray:
        """Last recorded multimodal attention for one geometric token over one
        view's body-image patch grid, normalized to [0,1]."""
        if self.last_attention is None:
            raise RuntimeError("attention recording was not enabled for the last encode")
        cfg = self.config
        g = cfg.anchors
        p = cfg.patches
        row = self.last_attention[token_index]
        n_views = (self.last_attention.shape[1] - 1 - g) // p
        if not 0 <= token_index < g:
            raise IndexError("geometric token index out of range")
        if not 0 <= view_index < n_views:
            raise IndexError("view index out of range")
        start = g + view_index * p
        patch = row[start:start + p]
        gh = cfg.img_h // cfg.patch
        gw = cfg.img_w // cfg.patch
        grid = patch.reshape(gh, gw)
        peak = grid.max()
        return grid / peak if peak > 0 else grid
