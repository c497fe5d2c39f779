"""Shared test utilities: finite-difference gradient probes and scene builders."""

from __future__ import annotations

import numpy as np

from lca import engine as eng
from lca.avatar import Camera


def fd_check(build_loss, params: list, rng: np.random.Generator,
             probes_per_param: int = 3, h: float = 1e-5,
             rtol: float = 1e-3, atol: float = 1e-7) -> float:
    """Compare analytic gradients against central finite differences.

    ``build_loss()`` must construct the scalar loss from the current values of
    ``params`` (engine tensors with requires_grad).  Probes a few random
    coordinates per parameter; returns the worst relative error seen.
    """
    eng.zero_grads(params)
    loss = build_loss()
    eng.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
             for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.size
        for _ in range(min(probes_per_param, n)):
            i = int(rng.integers(n))
            orig = flat[i]
            flat[i] = orig + h
            lp = build_loss().item()
            flat[i] = orig - h
            lm = build_loss().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = g.reshape(-1)[i]
            denom = max(abs(fd), abs(an), atol / rtol)
            err = abs(fd - an) / denom
            assert err < rtol, (
                f"gradient mismatch at {p.name or 'param'}[{i}]: "
                f"analytic {an:.6g} vs fd {fd:.6g} (rel {err:.2e})")
            worst = max(worst, err)
    return worst


def random_scene(rng: np.random.Generator, n: int = 6, spread: float = 0.4):
    """A small random Gaussian cloud in front of a 32x32 camera, kept away
    from the hard visibility gates so finite differences stay valid."""
    color = rng.uniform(0.1, 0.9, (n, 3))
    position = np.concatenate([rng.uniform(-spread, spread, (n, 2)),
                               rng.uniform(1.6, 2.6, (n, 1))], axis=1)
    opacity = rng.uniform(0.35, 0.85, n)
    quat = rng.normal(0, 1, (n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    log_scale = rng.uniform(np.log(0.05), np.log(0.15), (n, 3))
    cam = Camera(fx=28.0, fy=28.0, cx=16.0, cy=16.0, width=32, height=32,
                 rotation=np.eye(3), translation=np.zeros(3))
    return color, position, opacity, quat, log_scale, cam


def params_of(*arrays):
    return [eng.parameter(np.asarray(a, dtype=eng.current_dtype())) for a in arrays]
