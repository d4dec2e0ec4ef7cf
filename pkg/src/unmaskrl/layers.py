"""Transformer pieces expressed with tape primitives.

Shared by the unmasking policy and the tiny masked diffusion model. All
activations are laid out ``(batch, length, channels)``; conditioning vectors
are ``(batch, 1, channels)`` so they broadcast over positions.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import truncnorm

INIT_STD = 0.02


def trunc_normal(rng, shape, std=INIT_STD):
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def sinusoidal_embedding(x, dim, scale=1000.0):
    """Sin/cos features of scalars ``x`` (B,) -> (B, 1, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(x, dtype=np.float64)[:, None] * scale * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, None, :]


def init_block(params, rng, prefix, hidden, ff, heads, affine=True):
    dh = hidden // heads
    for h in range(heads):
        for name in "qkv":
            params[f"{prefix}.attn.{name}{h}"] = trunc_normal(rng, (hidden, dh))
        params[f"{prefix}.attn.o{h}"] = trunc_normal(rng, (dh, hidden))
    params[f"{prefix}.attn.bo"] = np.zeros(hidden)
    params[f"{prefix}.ff.w1"] = trunc_normal(rng, (hidden, ff))
    params[f"{prefix}.ff.b1"] = np.zeros(ff)
    params[f"{prefix}.ff.w2"] = trunc_normal(rng, (ff, hidden))
    params[f"{prefix}.ff.b2"] = np.zeros(hidden)
    if affine:
        for site in ("ln1", "ln2"):
            params[f"{prefix}.{site}.g"] = np.ones(hidden)
            params[f"{prefix}.{site}.b"] = np.zeros(hidden)


def attention(tape, x, prefix, heads, positions):
    """Bidirectional multi-head self-attention with rotary positions."""
    out = None
    for h in range(heads):
        q = tape.rope(tape.linear(x, f"{prefix}.attn.q{h}"), positions)
        k = tape.rope(tape.linear(x, f"{prefix}.attn.k{h}"), positions)
        v = tape.linear(x, f"{prefix}.attn.v{h}")
        scores = tape.matmul(q, k, transpose_b=True) * (1.0 / math.sqrt(q.shape[-1]))
        o = tape.linear(tape.matmul(tape.softmax(scores), v), f"{prefix}.attn.o{h}")
        out = o if out is None else out + o
    return out + tape.param(f"{prefix}.attn.bo")


def _norm(tape, x, prefix, site, mod):
    y = tape.layer_norm(x)
    if mod is not None:
        scale, shift = mod
        return y * (scale + 1.0) + shift
    return y * tape.param(f"{prefix}.{site}.g") + tape.param(f"{prefix}.{site}.b")


def block(tape, x, prefix, heads, positions, mods=None):
    """Pre-norm block; ``mods`` = ((scale1, shift1), (scale2, shift2)) switches to AdaLN."""
    m1, m2 = mods if mods is not None else (None, None)
    x = x + attention(tape, _norm(tape, x, prefix, "ln1", m1), prefix, heads, positions)
    h = tape.silu(tape.linear(_norm(tape, x, prefix, "ln2", m2), f"{prefix}.ff.w1", f"{prefix}.ff.b1"))
    return x + tape.linear(h, f"{prefix}.ff.w2", f"{prefix}.ff.b2")
