"""Exhaustive oracles for tiny instances."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..diffenv import ExactDenoiser, support_mask
from ..errors import ConfigError
from ..grpo import reward

MAX_ORACLE_LEN = 8


def enumerate_posterior(env, prompt, answer) -> np.ndarray:
    """Per-position posterior (L, V) by summing the chain probability of every completion."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    answer = np.asarray(answer, dtype=np.int64)
    spec = env.spec
    masked = np.flatnonzero(answer == env.mask_id)
    out = np.zeros((env.L, env.V))
    total = 0.0
    for fill in itertools.product(range(env.V), repeat=masked.size):
        x = answer.copy()
        x[masked] = fill
        seq = np.concatenate([prompt, x])
        p = spec.initial_dist[seq[0]] * np.prod(spec.transition[seq[:-1], seq[1:]])
        if p == 0.0:
            continue
        total += p
        out[np.arange(env.L), x] += p
    if total == 0.0:
        raise ConfigError("no completion of this state has positive probability")
    return out / total


@dataclass
class OracleResult:
    best_reward: float
    schedule: list  # list of position lists, one per step
    steps: int
    correct: int


def brute_force_best(env, prompt, alpha, denoiser=None, block_len=None, reference=None, shape="multiplicative"):
    """Best achievable terminal reward from the fully masked state under greedy commits.

    Every sequence of non-empty unmask subsets is considered; states are
    memoized since greedy dynamics make the reachable states a DAG.
    """
    L = env.L
    if L > MAX_ORACLE_LEN:
        raise ConfigError(f"brute_force_best needs answer_len <= {MAX_ORACLE_LEN}, got {L}")
    denoiser = denoiser or ExactDenoiser(env)
    prompt = np.asarray(prompt, dtype=np.int64).reshape(1, env.d)
    M, T = env.mask_id, L
    memo = {}

    def solve(ans):
        """Map correctness -> (min steps to a completion with that correctness, first subset)."""
        key = ans.tobytes()
        if key in memo:
            return memo[key]
        masked = ans == M
        if not masked.any():
            res = {env.correctness(prompt[0], ans, reference): (0, None)}
            memo[key] = res
            return res
        dist = denoiser.predict_proba(prompt, ans[None])[0]
        tokens = dist.argmax(axis=-1)
        pos = np.flatnonzero(support_mask(masked[None], block_len)[0])
        res = {}
        for code in range(1, 1 << pos.size):
            sel = pos[[(code >> j) & 1 == 1 for j in range(pos.size)]]
            nxt = ans.copy()
            nxt[sel] = tokens[sel]
            for c, (n, _) in solve(nxt).items():
                if c not in res or n + 1 < res[c][0]:
                    res[c] = (n + 1, sel.tolist())
        memo[key] = res
        return res

    start = np.full(L, M, dtype=np.int64)
    options = solve(start)
    best = None
    for c, (n, _) in sorted(options.items(), reverse=True):
        val = reward(c, T, T - n, alpha, shape)
        if best is None or val > best[0]:
            best = (val, c, n)
    val, c, n = best
    schedule, ans = [], start
    while (ans == M).any():
        k, sel = solve(ans)[c]
        schedule.append(sel)
        dist = denoiser.predict_proba(prompt, ans[None])[0]
        ans = ans.copy()
        ans[sel] = dist.argmax(axis=-1)[sel]
    return OracleResult(float(val), schedule, n, int(c))
