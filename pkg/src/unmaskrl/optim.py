"""AdamW with global-norm clipping and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .gradkit import ParamStore

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def learning_rate(step: int, base_lr: float, warmup: int, total: int, schedule: str = "cosine") -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then cosine decay to 0 at ``total``.

    Steps are 1-indexed: ``step == warmup`` reaches the full rate.
    """
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if schedule == "constant":
        return base_lr
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptState:
    m: ParamStore
    v: ParamStore
    t: int = 0
    skipped: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def zeros(cls, params: ParamStore) -> "OptState":
        return cls(params.zeros_like(), params.zeros_like())


def clip_by_global_norm(grads: ParamStore, max_norm: float):
    norm = grads.global_norm()
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = ParamStore((k, g * scale) for k, g in grads.items())
    return grads, norm


def optimizer_step(params, grads, state: OptState, *, lr, weight_decay=0.0, max_grad_norm=None):
    """One AdamW update at learning rate ``lr``; returns ``(params, state, grad_norm)``.

    Non-finite gradients skip the update (parameters and moments unchanged).
    """
    if not grads.is_finite():
        log.warning("non-finite gradient at optimizer step %d; update skipped", state.t + 1)
        state.skipped += 1
        return params, state, float("nan")
    grads, norm = clip_by_global_norm(grads, max_grad_norm)
    state.t += 1
    c1 = 1.0 - BETA1**state.t
    c2 = 1.0 - BETA2**state.t
    new = ParamStore()
    for k, p in params.items():
        g = grads[k]
        m = state.m[k] = BETA1 * state.m[k] + (1 - BETA1) * g
        v = state.v[k] = BETA2 * state.v[k] + (1 - BETA2) * g * g
        new[k] = p - lr * (m / c1 / (np.sqrt(v / c2) + ADAM_EPS) + weight_decay * p)
    return new, state, norm
