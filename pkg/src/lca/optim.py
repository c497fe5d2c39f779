"""AdamW with decoupled weight decay, LR schedule, layer-wise decay, clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    """Per-parameter Adam moments plus the shared hyperparameters."""

    base_lr: float = 4e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)   # param key -> first moment
    v: dict = field(default_factory=dict)   # param key -> second moment


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float,
               lr_scale: dict | None = None):
    """One AdamW update, in place on the arrays in ``params``.

    Weight decay is decoupled: it scales with the effective learning rate and
    is never folded into the gradient.  ``lr_scale`` optionally multiplies the
    learning rate per parameter key (layer-wise decay).
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {key}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step_lr = lr * (1.0 if lr_scale is None else lr_scale.get(key, 1.0))
        m_hat = m / bc1
        v_hat = v / bc2
        p -= step_lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)


def lr_schedule(step: int, total: int, warmup: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then cosine decay to 0."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup >= total:
        raise ValueError("warmup must be shorter than total")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    frac = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def layerwise_lr(layer_index: int, num_layers: int, gamma: float, base_lr: float) -> float:
    """Geometric LR decay toward earlier layers; the last layer keeps base_lr."""
    if not 0 <= layer_index < num_layers:
        raise ValueError("layer_index out of range")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    return base_lr * gamma ** (num_layers - 1 - layer_index)


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(grads: dict, max_norm: float = 1.0) -> tuple[dict, float]:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns (scaled grads, pre-clip norm).  NaN gradients are an explicit
    error, never silently clipped away.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {key!r}")
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
