"""Tile-based software rasterizer for 3D Gaussians.

EWA projection to screen-space ellipses, front-to-back alpha compositing in
16x16 pixel tiles, and a hand-derived backward pass that replays compositing
per tile and chains adjoints down to color, position, opacity, rotation, and
scale.  Depth sorting breaks ties by Gaussian index, so renders are
deterministic and submission-order independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .avatar import Camera
from .engine import Tensor

TILE = 16
NEAR_PLANE = 0.05
ALPHA_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_FLOOR = 1e-4
LOWPASS = 0.3  # px^2 dilation added to the 2D covariance diagonal


@dataclass
class Splat2D:
    """One projected Gaussian: pixel mean, 2D covariance (a,b,c), depth."""

    mean2d: np.ndarray
    cov2d: np.ndarray     # (a, b, c) for [[a, b], [b, c]]
    depth: float
    opacity: float
    color: np.ndarray
    index: int


@dataclass
class ProjectedScene:
    """Batched splat arrays for the kept (non-culled) Gaussians."""

    keep: np.ndarray      # [Mk] indices into the source set
    mean2d: np.ndarray    # [Mk,2]
    cov2d: np.ndarray     # [Mk,3]
    conic: np.ndarray     # [Mk,3]
    depth: np.ndarray     # [Mk]
    opacity: np.ndarray   # [Mk]
    color: np.ndarray     # [Mk,3]
    radius: np.ndarray    # [Mk] 3-sigma pixel radius
    view_pos: np.ndarray  # [Mk,3]


def quat_to_matrices(q: np.ndarray) -> np.ndarray:
    """Batch quaternion (w,x,y,z) -> rotation matrix, raw polynomial form."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def project_scene(color: np.ndarray, position: np.ndarray, opacity: np.ndarray,
                  quat: np.ndarray, scale: np.ndarray, cam: Camera) -> ProjectedScene:
    """EWA-project all Gaussians; culls behind-camera and near-invisible ones."""
    dt = color.dtype
    rot_w = cam.rotation.astype(dt)
    view = position @ rot_w.T + cam.translation.astype(dt)
    z = view[:, 2]
    keep = (z > NEAR_PLANE) & (opacity >= ALPHA_CUTOFF)
    keep_idx = np.nonzero(keep)[0]
    view = view[keep_idx]
    z = view[:, 2]
    x, y = view[:, 0], view[:, 1]

    rq = quat_to_matrices(quat[keep_idx])
    s2 = scale[keep_idx] ** 2
    sigma3 = rq * s2[:, None, :] @ rq.transpose(0, 2, 1)

    jac = np.zeros((len(keep_idx), 2, 3), dtype=dt)
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z ** 2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z ** 2
    m = jac @ rot_w[None]
    cov2 = m @ sigma3 @ m.transpose(0, 2, 1)
    a = cov2[:, 0, 0] + LOWPASS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + LOWPASS
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    # bin out to where alpha drops below the compositing cutoff (≈3.33 sigma
    # at full opacity); this makes tiled rendering exactly match a global tile
    q = np.sqrt(2.0 * np.log(np.maximum(opacity[keep_idx] / ALPHA_CUTOFF, 1.0)))
    radius = np.maximum(np.ceil(q * np.sqrt(lam)), 1.0)
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    return ProjectedScene(keep=keep_idx, mean2d=mean2d,
                          cov2d=np.stack([a, b, c], axis=1), conic=conic,
                          depth=z.copy(), opacity=opacity[keep_idx],
                          color=color[keep_idx], radius=radius, view_pos=view)


def project_gaussian(color, position, opacity, quat, scale, cam: Camera) -> Splat2D | None:
    """Project a single Gaussian; None when culled."""
    dt = np.float64
    scene = project_scene(np.asarray([color], dt), np.asarray([position], dt),
                          np.asarray([opacity], dt), np.asarray([quat], dt),
                          np.asarray([scale], dt), cam)
    if len(scene.keep) == 0:
        return None
    return Splat2D(mean2d=scene.mean2d[0], cov2d=scene.cov2d[0],
                   depth=float(scene.depth[0]), opacity=float(scene.opacity[0]),
                   color=scene.color[0], index=0)


def tile_bins(scene: ProjectedScene, height: int, width: int,
              tile: int = TILE) -> list[tuple[int, int, np.ndarray]]:
    """Per-tile splat index lists, front-to-back, ties broken by Gaussian index."""
    order = np.lexsort((scene.keep, scene.depth))
    ty = (height + tile - 1) // tile
    tx = (width + tile - 1) // tile
    mean = scene.mean2d[order]
    rad = scene.radius[order]
    x0 = np.clip(np.floor((mean[:, 0] - rad) / tile).astype(int), 0, tx - 1)
    x1 = np.clip(np.floor((mean[:, 0] + rad) / tile).astype(int), 0, tx - 1)
    y0 = np.clip(np.floor((mean[:, 1] - rad) / tile).astype(int), 0, ty - 1)
    y1 = np.clip(np.floor((mean[:, 1] + rad) / tile).astype(int), 0, ty - 1)
    onscreen = ((mean[:, 0] + rad) >= 0) & ((mean[:, 0] - rad) < width) \
        & ((mean[:, 1] + rad) >= 0) & ((mean[:, 1] - rad) < height)
    bins = []
    for tyi in range(ty):
        for txi in range(tx):
            hit = onscreen & (x0 <= txi) & (txi <= x1) & (y0 <= tyi) & (tyi <= y1)
            bins.append((tyi, txi, order[hit]))
    return bins


def _tile_pixels(tyi: int, txi: int, height: int, width: int, tile: int, dt):
    r0, r1 = tyi * tile, min((tyi + 1) * tile, height)
    c0, c1 = txi * tile, min((txi + 1) * tile, width)
    rows, cols = np.mgrid[r0:r1, c0:c1]
    pix = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1).astype(dt)
    return (r0, r1, c0, c1), pix


def _composite(scene: ProjectedScene, sel: np.ndarray, pix: np.ndarray):
    """Vectorized front-to-back weights for one tile.

    Returns (alpha [P,S], weights [P,S], gauss_value [P,S]); weights already
    honor the alpha cutoff and the transmittance termination floor.
    """
    d = pix[:, None, :] - scene.mean2d[None, sel, :]
    co = scene.conic[sel]
    power = -0.5 * (co[:, 0] * d[:, :, 0] ** 2 + co[:, 2] * d[:, :, 1] ** 2) \
        - co[:, 1] * d[:, :, 0] * d[:, :, 1]
    gval = np.exp(np.minimum(power, 0.0))
    alpha = scene.opacity[sel] * gval
    alpha_eff = np.where(alpha >= ALPHA_CUTOFF, alpha, 0.0)
    trans = np.cumprod(1.0 - alpha_eff, axis=1)
    t_before = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    live = t_before >= TRANSMITTANCE_FLOOR
    weights = alpha_eff * t_before * live
    return alpha_eff, weights, gval, t_before, live, d


def rasterize_forward(scene: ProjectedScene, height: int, width: int,
                      tile: int = TILE):
    """Composite to an RGBA float image; also returns the tile bins for backward."""
    dt = scene.color.dtype
    img = np.zeros((height, width, 3), dtype=dt)
    alpha_img = np.zeros((height, width), dtype=dt)
    bins = tile_bins(scene, height, width, tile)
    for tyi, txi, sel in bins:
        (r0, r1, c0, c1), pix = _tile_pixels(tyi, txi, height, width, tile, dt)
        if len(sel) == 0:
            continue
        _, weights, _, _, _, _ = _composite(scene, sel, pix)
        # accumulate strictly front-to-back, one splat at a time: adding an
        # exact-zero term never changes a pixel's rounding, so zero-weight
        # splats excluded by the binning are bit-neutral and tiled output
        # matches a single global tile exactly
        tile_rgb = np.zeros((pix.shape[0], 3), dtype=dt)
        tile_a = np.zeros(pix.shape[0], dtype=dt)
        for s in range(len(sel)):
            w = weights[:, s]
            tile_rgb += w[:, None] * scene.color[sel[s]]
            tile_a += w
        img[r0:r1, c0:c1] = tile_rgb.reshape(r1 - r0, c1 - c0, 3)
        alpha_img[r0:r1, c0:c1] = tile_a.reshape(r1 - r0, c1 - c0)
    return img, alpha_img, bins


def rasterize_backward(scene: ProjectedScene, bins, g_img: np.ndarray,
                       g_alpha: np.ndarray, height: int, width: int,
                       num_gaussians: int, position: np.ndarray,
                       quat: np.ndarray, scale: np.ndarray, cam: Camera,
                       tile: int = TILE):
    """Adjoints for (color, position, opacity, quat, scale) by tile replay."""
    dt = scene.color.dtype
    mk = len(scene.keep)
    g_color_k = np.zeros((mk, 3), dtype=dt)
    g_opac_k = np.zeros(mk, dtype=dt)
    g_mean2d = np.zeros((mk, 2), dtype=dt)
    g_conic = np.zeros((mk, 3), dtype=dt)

    for tyi, txi, sel in bins:
        if len(sel) == 0:
            continue
        (r0, r1, c0, c1), pix = _tile_pixels(tyi, txi, height, width, tile, dt)
        gi = g_img[r0:r1, c0:c1].reshape(-1, 3)
        ga = g_alpha[r0:r1, c0:c1].reshape(-1)
        if not (np.any(gi) or np.any(ga)):
            continue
        alpha, weights, gval, t_before, live, d = _composite(scene, sel, pix)
        colors = scene.color[sel]
        g_color_k[sel] += weights.T @ gi

        cdot = gi @ colors.T                       # [P,S]
        wc = weights * cdot
        after_c = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc   # sum over j > s
        after_a = np.cumsum(weights[:, ::-1], axis=1)[:, ::-1] - weights
        one_m = 1.0 - alpha
        inv = np.where(one_m > 1e-6, 1.0 / np.maximum(one_m, 1e-6), 0.0)
        active = live & (alpha > 0.0)
        g_al = active * (t_before * cdot - after_c * inv
                         + ga[:, None] * (t_before - after_a * inv))

        g_opac_k[sel] += (g_al * gval).sum(axis=0)
        gpow = g_al * gval * scene.opacity[sel]
        co = scene.conic[sel]
        dx, dy = d[:, :, 0], d[:, :, 1]
        gmx = gpow * (co[:, 0] * dx + co[:, 1] * dy)
        gmy = gpow * (co[:, 1] * dx + co[:, 2] * dy)
        g_mean2d[sel, 0] += gmx.sum(axis=0)
        g_mean2d[sel, 1] += gmy.sum(axis=0)
        g_conic[sel, 0] += (-0.5 * gpow * dx * dx).sum(axis=0)
        g_conic[sel, 1] += (-gpow * dx * dy).sum(axis=0)
        g_conic[sel, 2] += (-0.5 * gpow * dy * dy).sum(axis=0)

    # ---- chain 2D adjoints to the 3D attributes (vectorized per splat) ----
    g_color = np.zeros((num_gaussians, 3), dtype=dt)
    g_pos = np.zeros((num_gaussians, 3), dtype=dt)
    g_opac = np.zeros(num_gaussians, dtype=dt)
    g_quat = np.zeros((num_gaussians, 4), dtype=dt)
    g_scale = np.zeros((num_gaussians, 3), dtype=dt)
    if mk == 0:
        return g_color, g_pos, g_opac, g_quat, g_scale
    keep = scene.keep
    g_color[keep] = g_color_k
    g_opac[keep] = g_opac_k

    # conic -> 2D covariance: dSigma2 = -K gK K with K the conic matrix
    kmat = np.zeros((mk, 2, 2), dtype=dt)
    kmat[:, 0, 0], kmat[:, 0, 1] = scene.conic[:, 0], scene.conic[:, 1]
    kmat[:, 1, 0], kmat[:, 1, 1] = scene.conic[:, 1], scene.conic[:, 2]
    gk = np.zeros((mk, 2, 2), dtype=dt)
    gk[:, 0, 0] = g_conic[:, 0]
    gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * g_conic[:, 1]
    gk[:, 1, 1] = g_conic[:, 2]
    g_sigma2 = -kmat @ gk @ kmat

    rot_w = cam.rotation.astype(dt)
    view = scene.view_pos
    x, y, z = view[:, 0], view[:, 1], view[:, 2]
    jac = np.zeros((mk, 2, 3), dtype=dt)
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z ** 2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z ** 2
    m = jac @ rot_w[None]
    rq = quat_to_matrices(quat[keep].astype(dt))
    s2 = scale[keep].astype(dt) ** 2
    sigma3 = rq * s2[:, None, :] @ rq.transpose(0, 2, 1)

    g_sigma3 = m.transpose(0, 2, 1) @ g_sigma2 @ m
    g_m = 2.0 * g_sigma2 @ m @ sigma3
    g_jac = g_m @ rot_w.T[None]

    g_view = np.zeros((mk, 3), dtype=dt)
    g_view[:, 0] = g_jac[:, 0, 2] * (-cam.fx / z ** 2)
    g_view[:, 1] = g_jac[:, 1, 2] * (-cam.fy / z ** 2)
    g_view[:, 2] = (g_jac[:, 0, 0] * (-cam.fx / z ** 2)
                    + g_jac[:, 1, 1] * (-cam.fy / z ** 2)
                    + g_jac[:, 0, 2] * (2 * cam.fx * x / z ** 3)
                    + g_jac[:, 1, 2] * (2 * cam.fy * y / z ** 3))
    g_view[:, 0] += g_mean2d[:, 0] * cam.fx / z
    g_view[:, 1] += g_mean2d[:, 1] * cam.fy / z
    g_view[:, 2] += -g_mean2d[:, 0] * cam.fx * x / z ** 2 \
        - g_mean2d[:, 1] * cam.fy * y / z ** 2
    g_pos[keep] = g_view @ rot_w

    # Sigma3 = R diag(s^2) R^T
    g_rq = 2.0 * g_sigma3 @ (rq * s2[:, None, :])
    rt_g_r = rq.transpose(0, 2, 1) @ g_sigma3 @ rq
    g_scale[keep] = 2.0 * scale[keep].astype(dt) * \
        np.stack([rt_g_r[:, 0, 0], rt_g_r[:, 1, 1], rt_g_r[:, 2, 2]], axis=1)

    w, qx, qy, qz = (quat[keep, 0].astype(dt), quat[keep, 1].astype(dt),
                     quat[keep, 2].astype(dt), quat[keep, 3].astype(dt))
    zeros = np.zeros_like(w)
    dr_dw = 2 * np.stack([
        np.stack([zeros, -qz, qy], -1),
        np.stack([qz, zeros, -qx], -1),
        np.stack([-qy, qx, zeros], -1)], -2)
    dr_dx = 2 * np.stack([
        np.stack([zeros, qy, qz], -1),
        np.stack([qy, -2 * qx, -w], -1),
        np.stack([qz, w, -2 * qx], -1)], -2)
    dr_dy = 2 * np.stack([
        np.stack([-2 * qy, qx, w], -1),
        np.stack([qx, zeros, qz], -1),
        np.stack([-w, qz, -2 * qy], -1)], -2)
    dr_dz = 2 * np.stack([
        np.stack([-2 * qz, -w, qx], -1),
        np.stack([w, -2 * qz, qy], -1),
        np.stack([qx, qy, zeros], -1)], -2)
    g_quat[keep, 0] = (g_rq * dr_dw).sum(axis=(1, 2))
    g_quat[keep, 1] = (g_rq * dr_dx).sum(axis=(1, 2))
    g_quat[keep, 2] = (g_rq * dr_dy).sum(axis=(1, 2))
    g_quat[keep, 3] = (g_rq * dr_dz).sum(axis=(1, 2))
    return g_color, g_pos, g_opac, g_quat, g_scale


# ---------------------------------------------------------------------------
# autodiff entry point
# ---------------------------------------------------------------------------

def render(color: Tensor, position: Tensor, opacity: Tensor, quat: Tensor,
           scale: Tensor, cam: Camera, height: int, width: int) -> Tensor:
    """Differentiable render: returns an [H,W,4] tensor (RGB + alpha)."""
    scene = project_scene(color.data, position.data, opacity.data,
                          quat.data, scale.data, cam)
    img, alpha_img, bins = rasterize_forward(scene, height, width)
    out = np.concatenate([img, alpha_img[..., None]], axis=-1)
    n = color.data.shape[0]

    def bwd(g):
        gc, gp, go, gq, gs = rasterize_backward(
            scene, bins, np.ascontiguousarray(g[..., :3]),
            np.ascontiguousarray(g[..., 3]), height, width, n,
            position.data, quat.data, scale.data, cam)
        color._accum(gc)
        position._accum(gp)
        opacity._accum(go)
        quat._accum(gq)
        scale._accum(gs)

    return eng.make_op(out, (color, position, opacity, quat, scale), bwd)


def render_np(color, position, opacity, quat, scale, cam: Camera,
              height: int, width: int):
    """Forward-only render on plain arrays; returns (rgb, alpha)."""
    dt = eng.current_dtype()
    scene = project_scene(np.asarray(color, dt), np.asarray(position, dt),
                          np.asarray(opacity, dt), np.asarray(quat, dt),
                          np.asarray(scale, dt), cam)
    img, alpha_img, _ = rasterize_forward(scene, height, width)
    return img, alpha_img
