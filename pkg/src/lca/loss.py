"""Training objectives: masked photometric terms, Gaussian regularizers, and
their weighted total.

The perceptual term is one minus a local structural-similarity score (11x11
Gaussian window); it fills the slot a pretrained perceptual network would in
a production setup and the interface admits a drop-in replacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import engine as eng
from .engine import Tensor


@dataclass
class LossWeights:
    w_l1: float = 0.1
    w_perc: float = 0.1
    reg: float = 1.0       # acap + asap weight
    skw: float = 0.001     # skin-corrective sparsity weight
    arap: float = 1.0
    smooth: float = 0.01   # corrective-field smoothness over node neighbors

    def __post_init__(self):
        for name in ("w_l1", "w_perc", "reg", "skw", "arap", "smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    l1_cano: float = 0.0
    perc_cano: float = 0.0
    l1_pose: float = 0.0
    perc_pose: float = 0.0
    acap: float = 0.0
    asap: float = 0.0
    arap: float = 0.0
    skw: float = 0.0
    smooth: float = 0.0
    total: float = 0.0

    def recompute_total(self, w: LossWeights) -> float:
        return (w.w_l1 * (self.l1_cano + self.l1_pose)
                + w.w_perc * (self.perc_cano + self.perc_pose)
                + w.reg * (self.acap + self.asap)
                + w.arap * self.arap + w.skw * self.skw
                + w.smooth * self.smooth)

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


def _as_mask(mask: np.ndarray, shape) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.shape != shape[:2]:
        raise ValueError(f"mask shape {m.shape} != image plane {shape[:2]}")
    return m


def l1_loss(target: np.ndarray, pred: Tensor, mask: np.ndarray) -> Tensor:
    """Mean absolute difference over masked pixels (all channels)."""
    if target.shape != pred.shape:
        raise ValueError(f"image shapes differ: {target.shape} vs {pred.shape}")
    m = _as_mask(mask, target.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("mask selects no pixels")
    mf = m.astype(eng.current_dtype())[..., None]
    diff = eng.abs_(pred - Tensor(target.astype(eng.current_dtype())))
    channels = target.shape[2] if target.ndim == 3 else 1
    return eng.sum_(diff * Tensor(mf)) * (1.0 / (count * channels))


# 11x11 Gaussian window, sigma 1.5 (the usual SSIM choice)
def _ssim_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


_KERNEL = _ssim_kernel()


def _blur(x: Tensor) -> Tensor:
    """2D correlation with the fixed SSIM window, zero-padded borders.

    The kernel is symmetric, so the adjoint is the same correlation applied to
    the upstream gradient.
    """
    kern = _KERNEL.astype(x.data.dtype)

    def run(a):
        if a.ndim == 2:
            return ndimage.correlate(a, kern, mode="constant")
        out = np.empty_like(a)
        for c in range(a.shape[2]):
            out[:, :, c] = ndimage.correlate(a[:, :, c], kern, mode="constant")
        return out

    def bwd(g):
        x._accum(run(g))

    return eng.make_op(run(x.data), (x,), bwd)


def ssim_map(x: Tensor, y: Tensor, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> Tensor:
    """Per-pixel structural similarity, averaged over channels."""
    mu_x = _blur(x)
    mu_y = _blur(y)
    sig_x = _blur(x * x) - mu_x * mu_x
    sig_y = _blur(y * y) - mu_y * mu_y
    sig_xy = _blur(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sig_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sig_x + sig_y + c2)
    s = num / den
    if s.ndim == 3:
        s = eng.mean(s, axis=2)
    return s


def perceptual_loss(target: np.ndarray, pred: Tensor, mask: np.ndarray) -> Tensor:
    """1 - mean local structural similarity over windows centered on masked pixels."""
    if target.shape[0] < 16 or target.shape[1] < 16:
        raise ValueError("perceptual loss needs images of at least 16x16")
    if target.shape != pred.shape:
        raise ValueError(f"image shapes differ: {target.shape} vs {pred.shape}")
    m = _as_mask(mask, target.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("mask selects no pixels")
    # zero out content outside the mask so it cannot leak into border windows
    mf3 = m.astype(eng.current_dtype())
    if target.ndim == 3:
        mf3 = mf3[..., None]
    t = Tensor((target * mf3).astype(eng.current_dtype()))
    p = pred * Tensor(mf3)
    s = ssim_map(t, p)
    masked_mean = eng.sum_(s * Tensor(m.astype(eng.current_dtype()))) * (1.0 / count)
    return 1.0 - masked_mean


def acap(positions: Tensor, anchors: np.ndarray) -> Tensor:
    """Mean squared distance from each Gaussian position to its anchor point."""
    if positions.shape != anchors.shape:
        raise ValueError(f"positions {positions.shape} vs anchors {anchors.shape}")
    d = positions - Tensor(anchors.astype(eng.current_dtype()))
    return eng.sum_(d * d) * (1.0 / positions.shape[0])


def asap(scales: Tensor, s_max: float = 0.02) -> Tensor:
    """Hinged scale penalty: mean of max(0, s - s_max)^2 over all components."""
    over = eng.maximum(scales - s_max, 0.0)
    return eng.mean(over * over)


def skin_sparsity(correctives: Tensor) -> Tensor:
    """L1 pull toward zero correctives (smooth-yet-sparse prior)."""
    return eng.mean(eng.abs_(correctives))


def total_loss(target: np.ndarray, cano_img: Tensor, pose_img: Tensor,
               mask: np.ndarray, positions: Tensor, scales: Tensor,
               anchors: np.ndarray, weights: LossWeights,
               arap_term: Tensor | None = None,
               skin_term: Tensor | None = None,
               smooth_term: Tensor | None = None) -> tuple[Tensor, LossReport]:
    """Both renderings supervised against the same target, plus regularizers."""
    terms = {
        "l1_cano": l1_loss(target, cano_img, mask),
        "perc_cano": perceptual_loss(target, cano_img, mask),
        "l1_pose": l1_loss(target, pose_img, mask),
        "perc_pose": perceptual_loss(target, pose_img, mask),
        "acap": acap(positions, anchors),
        "asap": asap(scales),
    }
    total = (weights.w_l1 * (terms["l1_cano"] + terms["l1_pose"])
             + weights.w_perc * (terms["perc_cano"] + terms["perc_pose"])
             + weights.reg * (terms["acap"] + terms["asap"]))
    report = LossReport(**{k: v.item() for k, v in terms.items()})
    if arap_term is not None:
        total = total + weights.arap * arap_term
        report.arap = arap_term.item()
    if skin_term is not None:
        total = total + weights.skw * skin_term
        report.skw = skin_term.item()
    if smooth_term is not None:
        total = total + weights.smooth * smooth_term
        report.smooth = smooth_term.item()
    # store the float64 recomputation so the report is self-consistent; the
    # returned tensor (float32 graph) is what training differentiates
    report.total = report.recompute_total(weights)
    return total, report
