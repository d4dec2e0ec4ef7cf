"""Forward masking, the unmasking transition, and the rollout loop."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError
from .chain import DenoiserOutput, Environment, GenState, support_mask


def forward_mask(x0, t: float, rng, mask_id: int) -> np.ndarray:
    """Replace each token by ``mask_id`` independently with probability ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    x0 = np.asarray(x0)
    return np.where(rng.random(x0.shape) < t, mask_id, x0)


def commit_tokens(dists: np.ndarray, tau: float, rng) -> np.ndarray:
    """Token per row of ``dists`` (..., V): argmax at tau=0, else a draw from ``p**(1/tau)``."""
    if tau == 0:
        return dists.argmax(axis=-1)
    logits = np.log(np.maximum(dists, 1e-300)) / tau
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    cum = np.cumsum(p, axis=-1)
    u = rng.random(cum.shape[:-1])
    return np.minimum((u[..., None] >= cum).sum(axis=-1), dists.shape[-1] - 1)


def transition(state: GenState, action, denoiser_output: DenoiserOutput, tau: float = 0.0, rng=None) -> GenState:
    """Commit tokens at selected masked positions of the active block.

    Bits elsewhere are ignored. ``nfe`` grows by one and ``t`` shrinks by one
    no matter how many tokens are committed.
    """
    action = np.asarray(action, dtype=bool)
    sel = action & state.support()
    answer = state.answer.copy()
    if sel.any():
        answer[sel] = commit_tokens(denoiser_output.dists[sel], tau, rng)
    return GenState(state.prompt, answer, state.t - 1, state.nfe + 1, state.T, state.block_len, state.mask_id)


@dataclass
class StepRecord:
    t: int
    answer: np.ndarray  # before the step
    dists: np.ndarray
    support: np.ndarray
    bits: np.ndarray
    order: list | None = None
    logprob: float | None = None
    committed: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    prompt: np.ndarray
    reference: np.ndarray | None
    T: int
    steps: list = field(default_factory=list)
    answer: np.ndarray | None = None
    nfe: int = 0
    complete: bool = False
    correct: int = 0
    expert: bool = False

    @property
    def T_hat(self):
        return self.T - self.nfe if self.complete else None

    def dump(self) -> str:
        """One JSON line per step: t, action bitmask (hex), committed tokens, nfe."""
        lines = []
        for i, s in enumerate(self.steps):
            mask = sum(1 << int(k) for k in np.flatnonzero(s.bits))
            rec = {
                "t": int(s.t),
                "action": hex(mask),
                "committed": {str(k): int(v) for k, v in s.committed.items()},
                "nfe": i + 1,
            }
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines)


@dataclass
class RolloutSettings:
    block_len: int | None = None
    tau: float = 0.0
    fallback_on: bool = True
    max_steps: int | None = None  # defaults to T = L


def run_rollouts(env: Environment, denoiser, sampler, prompts, settings: RolloutSettings, rngs, references=None):
    """Roll out one trajectory per prompt in lockstep.

    ``sampler.select(answers, dists, support, t_frac, rngs, fallback)`` gets
    the still-running rows and returns ``(bits, orders, logprobs)`` where
    ``orders``/``logprobs`` may be ``None``. Each row draws only from its own
    generator in ``rngs``.
    """
    prompts = np.asarray(prompts, dtype=np.int64).reshape(len(rngs), env.d)
    B, L, M = len(rngs), env.L, env.mask_id
    T = L if settings.max_steps is None else settings.max_steps
    bl = settings.block_len
    if bl is not None and (bl < 1 or L % bl):
        raise ConfigError(f"block length {bl} must divide answer length {L}")
    answers = np.full((B, L), M, dtype=np.int64)
    nfe = np.zeros(B, dtype=np.int64)
    trajs = [
        Trajectory(prompts[i], None if references is None else np.asarray(references[i]), T) for i in range(B)
    ]
    for step in range(T):
        live = np.flatnonzero((answers == M).any(axis=1))
        if live.size == 0:
            break
        t_now = T - step
        dists = denoiser.predict_proba(prompts[live], answers[live])
        sup = support_mask(answers[live] == M, bl)
        bits, orders, lps = sampler.select(
            answers[live], dists, sup, t_now / T, [rngs[i] for i in live], settings.fallback_on
        )
        bits = np.asarray(bits, dtype=bool)
        if np.any(bits & ~sup):
            r = int(np.flatnonzero((bits & ~sup).any(axis=1))[0])
            raise ContractError(f"sampler selected positions outside the masked support (row {int(live[r])})")
        for j, i in enumerate(live):
            sel = np.flatnonzero(bits[j])
            before = answers[i].copy()
            committed = {}
            if sel.size:
                toks = commit_tokens(dists[j, sel], settings.tau, rngs[i])
                answers[i, sel] = toks
                committed = dict(zip(sel.tolist(), toks.tolist()))
            trajs[i].steps.append(
                StepRecord(
                    t_now,
                    before,
                    dists[j],
                    sup[j],
                    bits[j],
                    None if orders is None else orders[j],
                    None if lps is None else float(lps[j]),
                    committed,
                )
            )
            nfe[i] += 1
    for i, tr in enumerate(trajs):
        tr.answer = answers[i].copy()
        tr.nfe = int(nfe[i])
        tr.complete = not np.any(answers[i] == M)
        tr.correct = env.correctness(prompts[i], answers[i], tr.reference) if tr.complete else 0
    return trajs


def rollout(env, denoiser, sampler, prompt, settings: RolloutSettings, rng, reference=None) -> Trajectory:
    refs = None if reference is None else [reference]
    return run_rollouts(env, denoiser, sampler, [prompt], settings, [rng], refs)[0]


class UnmaskAll:
    """Select every position in the support."""

    def select(self, answers, dists, support, t_frac, rngs, fallback):
        return support.copy(), None, None


class OnePerStep:
    """Select the lowest-index supported position."""

    def select(self, answers, dists, support, t_frac, rngs, fallback):
        bits = np.zeros_like(support)
        rows = np.flatnonzero(support.any(axis=1))
        bits[rows, support[rows].argmax(axis=1)] = True
        return bits, None, None
