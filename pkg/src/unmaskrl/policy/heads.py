"""Bernoulli and dynamic Plackett-Luce (DPLS) action heads.

Numpy functions act on one state and are used for sampling and for
reference likelihoods; the ``*_logprob_graph`` functions compute the same
likelihoods on a tape for a whole batch of recorded steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import ContractError


@dataclass
class ActionRecord:
    bits: np.ndarray
    logprob_old: float
    support: np.ndarray
    order: list | None = None
    fallback_used: bool = False
    flagged: bool = False


def _support(support, L):
    s = np.asarray(support)
    if s.dtype != bool:
        m = np.zeros(L, dtype=bool)
        m[s.astype(np.int64)] = True
        return m
    return s.copy()


def gumbel(rng, shape):
    """Standard Gumbel noise ``-log(-log(U))`` with U strictly inside (0, 1)."""
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    u = np.clip(u, tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


# --- Bernoulli --------------------------------------------------------------


def bernoulli_logprob(b, tau_pi, bits, support) -> float:
    """Sum over the support of ``u log s + (1-u) log(1-s)`` with ``s = sigmoid(b/tau)``.

    Returns ``-inf`` when a saturated logit contradicts the chosen bit, i.e.
    when that bit's probability underflows to zero in double precision.
    """
    b = np.asarray(b, dtype=np.float64)
    sup = _support(support, b.size)
    bits = np.asarray(bits, dtype=bool)
    if np.any(bits & ~sup):
        raise ContractError("action bits set outside the support")
    z = b[sup] / tau_pi
    u = bits[sup]
    # log sigmoid(z) = -logaddexp(0, -z)
    lp = np.where(u, -np.logaddexp(0.0, -z), -np.logaddexp(0.0, z))
    if np.any(expit(np.where(u, z, -z)) == 0.0):
        return -np.inf
    return float(lp.sum())


def bernoulli_sample(b, tau_pi, support, rng, fallback=False) -> ActionRecord:
    b = np.asarray(b, dtype=np.float64)
    sup = _support(support, b.size)
    if not sup.any():
        raise ContractError("empty support")
    if tau_pi <= 0:
        raise ContractError("tau_pi must be positive")
    s = 0.5 * (1.0 + np.tanh(0.5 * b / tau_pi))
    bits = (rng.random(b.size) < s) & sup
    lp = bernoulli_logprob(b, tau_pi, bits, sup)
    used = False
    if fallback and not bits.any():
        idx = np.flatnonzero(sup)
        # argmax on logits: the probabilities may all have underflowed
        bits[idx[np.argmax(b[idx])]] = True
        used = True
    return ActionRecord(bits, lp, sup, fallback_used=used, flagged=not np.isfinite(lp))


# --- DPLS ---------------------------------------------------------------------


def dpls_sample(b, tau_pi, support, rng) -> ActionRecord:
    """Variable-length ordered selection with a STOP item of utility 0.

    The first pick is a Gumbel-max over supported tokens (STOP excluded);
    the rest is a Gumbel-argsort over the remaining tokens plus STOP,
    truncated at STOP.
    """
    b = np.asarray(b, dtype=np.float64)
    sup = _support(support, b.size)
    idx = np.flatnonzero(sup)
    if idx.size == 0:
        raise ContractError("empty support")
    z = b[idx] / tau_pi
    first = int(np.argmax(z + gumbel(rng, idx.size)))
    order = [int(idx[first])]
    rest = np.delete(idx, first)
    if rest.size:
        keys = np.concatenate([b[rest] / tau_pi, [0.0]]) + gumbel(rng, rest.size + 1)
        for j in np.argsort(-keys, kind="stable"):
            if j == rest.size:
                break
            order.append(int(rest[j]))
    bits = np.zeros(b.size, dtype=bool)
    bits[order] = True
    return ActionRecord(bits, dpls_logprob(b, tau_pi, order, sup), sup, order=order)


def dpls_logprob(b, tau_pi, order, support) -> float:
    b = np.asarray(b, dtype=np.float64)
    sup = _support(support, b.size)
    order = [int(k) for k in order]
    if not order:
        raise ContractError("DPLS selection must be non-empty")
    if len(set(order)) != len(order):
        raise ContractError("DPLS selection has duplicate positions")
    if any(not sup[k] for k in order):
        raise ContractError("DPLS selection leaves the support")
    z = b / tau_pi
    remaining = sup.copy()
    lp = z[order[0]] - np.logaddexp.reduce(z[remaining])
    remaining[order[0]] = False
    for k in order[1:]:
        lp += z[k] - np.logaddexp.reduce(np.append(z[remaining], 0.0))
        remaining[k] = False
    if remaining.any():
        lp -= np.logaddexp.reduce(np.append(z[remaining], 0.0))
    return float(lp)


# --- tape versions -------------------------------------------------------------


def bernoulli_logprob_graph(tape, logits, bits, support, tau_pi=1.0):
    """Per-row Bernoulli log-likelihoods for logits node (B, 1, L) -> node (B,)."""
    bits = np.asarray(bits, dtype=np.float64)[:, None, :]
    sup = np.asarray(support, dtype=np.float64)[:, None, :]
    z = logits * (1.0 / tau_pi)
    on = tape.log(tape.sigmoid(z))
    off = tape.log(tape.sigmoid(-z))
    per = on * (bits * sup) + off * ((1.0 - bits) * sup)
    return tape.sum(tape.sum(per, axis=-1), axis=-1)


def dpls_terms(orders, support):
    """Constant tensors describing each row's DPLS likelihood.

    Returns ``(picked, R, stop, active)``: ``picked`` (B, L) marks selected
    positions; ``R`` (B, K, L) marks the token set of the K-th normalizer;
    ``stop`` (B, K) is 1 where STOP is part of that normalizer; ``active``
    (B, K) is 1 for real terms and 0 for padding.
    """
    support = np.asarray(support, dtype=bool)
    B, L = support.shape
    K = max(len(o) for o in orders) + 1
    picked = np.zeros((B, L))
    R = np.zeros((B, K, L))
    stop = np.ones((B, K))
    active = np.zeros((B, K))
    for r, order in enumerate(orders):
        remaining = support[r].copy()
        picked[r, order] = 1.0
        R[r, 0] = remaining
        stop[r, 0] = 0.0
        active[r, 0] = 1.0
        for i, k in enumerate(order, start=1):
            remaining[k] = False
            if i == len(order) and not remaining.any():
                break
            R[r, i] = remaining
            active[r, i] = 1.0
    return picked, R, stop, active


def dpls_logprob_graph(tape, logits, orders, support, tau_pi=1.0):
    """Per-row DPLS log-likelihoods for logits node (B, 1, L) -> node (B,)."""
    picked, R, stop, active = dpls_terms(orders, support)
    z = logits * (1.0 / tau_pi)
    zv = z.value[:, 0, :]
    sup = np.asarray(support, dtype=bool)
    # per-row shift, constant w.r.t. the tape
    shift = np.where(sup, zv, -np.inf).max(axis=1)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    ez = tape.exp(z + (-shift)[:, None, None])  # (B,1,L)
    tokens = tape.sum(ez * R, axis=-1)  # (B,K)
    stop_mass = stop * np.exp(-shift)[:, None] + (1.0 - active)
    log_norm = tape.log(tokens + stop_mass) + shift[:, None]
    chosen = tape.sum(tape.sum(z * picked[:, None, :], axis=-1), axis=-1)
    return chosen - tape.sum(log_norm * active, axis=-1)
