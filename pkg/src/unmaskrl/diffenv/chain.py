"""Markov-chain data distributions with an exact posterior denoiser.

Tokens are ``0..V-1``; the mask token is ``V``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InconsistencyError

REWARD_MODES = ("validity", "exact_match")


@dataclass
class MarkovChainSpec:
    vocab_size: int
    initial_dist: np.ndarray
    transition: np.ndarray
    prompt_len: int
    answer_len: int

    def __post_init__(self):
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64).reshape(-1)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        V = self.vocab_size
        if V < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.transition.size == V * V and self.transition.ndim == 1:
            self.transition = self.transition.reshape(V, V)
        if self.initial_dist.shape != (V,):
            raise ConfigError(f"initial_dist must have {V} entries, got {self.initial_dist.size}")
        if self.transition.shape != (V, V):
            raise ConfigError(f"transition must be {V}x{V}, got shape {self.transition.shape}")
        if self.prompt_len < 0 or self.answer_len < 1:
            raise ConfigError("prompt_len must be >= 0 and answer_len >= 1")

    def validate(self) -> None:
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > 1e-12:
            raise ConfigError("initial_dist must be non-negative and sum to 1 (+-1e-12)")
        if np.any(self.transition < 0):
            raise ConfigError("transition has negative entries")
        rows = self.transition.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows - 1.0) > 1e-12)
        if bad.size:
            raise ConfigError(f"transition row {bad[0]} sums to {rows[bad[0]]!r}, expected 1 (+-1e-12)")
        if np.any(self.transition.max(axis=1) <= 0):
            raise ConfigError("every state needs an outgoing transition with positive probability")

    # presets
    @classmethod
    def two_mode(cls, prompt_len=0, answer_len=16):
        """Uniform start over {A, B}; only A->A and B->B allowed."""
        return cls(2, [0.5, 0.5], np.eye(2), prompt_len, answer_len)

    @classmethod
    def identity(cls, vocab_size=2, prompt_len=1, answer_len=4):
        V = vocab_size
        return cls(V, np.full(V, 1.0 / V), np.eye(V), prompt_len, answer_len)

    @classmethod
    def cyclic(cls, vocab_size=3, prompt_len=1, answer_len=3):
        """Deterministic cycle 0 -> 1 -> ... -> V-1 -> 0."""
        V = vocab_size
        return cls(V, np.full(V, 1.0 / V), np.roll(np.eye(V), 1, axis=1), prompt_len, answer_len)

    @classmethod
    def noisy_cycle(cls, vocab_size=3, cycle_prob=0.9, prompt_len=0, answer_len=8):
        """Step ``i -> i+1`` with probability ``cycle_prob``, else ``i -> i+2`` (mod V); no self-loops."""
        V = vocab_size
        if V < 3:
            raise ConfigError("noisy_cycle needs vocab_size >= 3")
        P = np.zeros((V, V))
        idx = np.arange(V)
        P[idx, (idx + 1) % V] = cycle_prob
        P[idx, (idx + 2) % V] += 1.0 - cycle_prob
        return cls(V, np.full(V, 1.0 / V), P, prompt_len, answer_len)

    @classmethod
    def random(cls, rng, vocab_size=3, prompt_len=1, answer_len=6, sparsity=0.0, concentration=1.0):
        """Dirichlet rows; ``sparsity`` zeroes that fraction of non-diagonal-max entries."""
        V = vocab_size
        P = rng.dirichlet(np.full(V, concentration), size=V)
        if sparsity > 0:
            drop = rng.random((V, V)) < sparsity
            drop[np.arange(V), P.argmax(axis=1)] = False
            P = np.where(drop, 0.0, P)
            P /= P.sum(axis=1, keepdims=True)
        pi = rng.dirichlet(np.full(V, concentration))
        return cls(V, pi, P, prompt_len, answer_len)


@dataclass
class GenState:
    """Prompt, partially masked answer, countdown step ``t`` and NFE counter."""

    prompt: np.ndarray
    answer: np.ndarray
    t: int
    nfe: int = 0
    T: int | None = None
    block_len: int | None = None
    mask_id: int = -1

    def __post_init__(self):
        self.prompt = np.asarray(self.prompt, dtype=np.int64)
        self.answer = np.asarray(self.answer, dtype=np.int64)
        if self.T is None:
            self.T = self.t

    @property
    def masked(self) -> np.ndarray:
        return self.answer == self.mask_id

    @property
    def complete(self) -> bool:
        return not self.masked.any()

    @property
    def active_block(self) -> tuple[int, int] | None:
        return active_block(self.masked, self.block_len)

    def support(self) -> np.ndarray:
        return support_mask(self.masked[None], self.block_len)[0]


def active_block(masked, block_len):
    idx = np.flatnonzero(masked)
    if idx.size == 0:
        return None
    L = len(masked)
    bl = block_len or L
    start = (idx[0] // bl) * bl
    return int(start), int(min(start + bl, L))


def support_mask(masked: np.ndarray, block_len: int | None) -> np.ndarray:
    """Masked positions inside the earliest block that still has a mask (batched)."""
    masked = np.asarray(masked, dtype=bool)
    B, L = masked.shape
    if not block_len or block_len >= L:
        return masked.copy()
    first = np.where(masked.any(axis=1), masked.argmax(axis=1), 0)
    start = (first // block_len) * block_len
    pos = np.arange(L)[None, :]
    return masked & (pos >= start[:, None]) & (pos < start[:, None] + block_len)


@dataclass
class DenoiserOutput:
    dists: np.ndarray
    confidences: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.confidences is None:
            self.confidences = self.dists.max(axis=-1)


class Environment:
    """A chain, its exact denoiser, a task sampler and the correctness predicate."""

    def __init__(self, spec: MarkovChainSpec, reward_mode: str = "validity"):
        spec.validate()
        if reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}, got {reward_mode!r}")
        self.spec = spec
        self.reward_mode = reward_mode
        n = spec.prompt_len + spec.answer_len
        V = spec.vocab_size
        powers = np.empty((n + 1, V, V))
        powers[0] = np.eye(V)
        for k in range(1, n + 1):
            powers[k] = powers[k - 1] @ spec.transition
        self._powers = powers
        # marginal of absolute position k
        self._marginals = np.einsum("v,kvw->kw", spec.initial_dist, powers)

    @property
    def V(self):
        return self.spec.vocab_size

    @property
    def mask_id(self):
        return self.spec.vocab_size

    @property
    def d(self):
        return self.spec.prompt_len

    @property
    def L(self):
        return self.spec.answer_len

    def initial_state(self, prompt, T=None, block_len=None) -> GenState:
        T = self.L if T is None else T
        return GenState(prompt, np.full(self.L, self.mask_id), T, 0, T, block_len, self.mask_id)

    # sampling
    def sample_sequences(self, n, rng, length=None) -> np.ndarray:
        length = self.d + self.L if length is None else length
        out = np.empty((n, length), dtype=np.int64)
        if length == 0:
            return out
        V = self.V
        cum0 = np.cumsum(self.spec.initial_dist)
        out[:, 0] = np.minimum(np.searchsorted(cum0, rng.random(n), side="right"), V - 1)
        cum = np.cumsum(self.spec.transition, axis=1)
        for k in range(1, length):
            u = rng.random(n)
            nxt = (u[:, None] >= cum[out[:, k - 1]]).sum(axis=1)
            out[:, k] = np.minimum(nxt, V - 1)
        return out

    def sample_tasks(self, n, rng):
        seqs = self.sample_sequences(n, rng)
        return seqs[:, : self.d], seqs[:, self.d :]

    def sample_task(self, rng):
        prompts, refs = self.sample_tasks(1, rng)
        return prompts[0], refs[0]

    def marginals(self, length=None) -> np.ndarray:
        length = self.d + self.L if length is None else length
        return self._marginals[:length]

    # exact denoiser
    def posterior_batch(self, prompts, answers) -> np.ndarray:
        """Per-position ``p(x_k = v | observed tokens)`` for a batch, shape (B, L, V).

        Unmasked answer positions come back one-hot on their committed token.
        """
        prompts = np.asarray(prompts, dtype=np.int64).reshape(len(answers), self.d)
        answers = np.asarray(answers, dtype=np.int64)
        B, L = answers.shape
        V, M, d = self.V, self.mask_id, self.d
        if L != self.L:
            raise ConfigError(f"answer length {L} != environment answer_len {self.L}")
        seq = np.concatenate([prompts, answers], axis=1)
        N = d + L
        observed = seq != M
        pos = np.arange(N)
        left = np.maximum.accumulate(np.where(observed, pos, -1), axis=1)
        left = np.concatenate([np.full((B, 1), -1), left[:, :-1]], axis=1)
        right = np.minimum.accumulate(np.where(observed, pos, N)[:, ::-1], axis=1)[:, ::-1]
        right = np.concatenate([right[:, 1:], np.full((B, 1), N)], axis=1)

        out = np.zeros((B, L, V))
        ans_obs = observed[:, d:]
        bi, ki = np.nonzero(ans_obs)
        out[bi, ki, answers[bi, ki]] = 1.0

        bi, ki = np.nonzero(~ans_obs)
        if bi.size == 0:
            return out
        p = ki + d
        a, b = left[bi, p], right[bi, p]
        has_a, has_b = a >= 0, b < N
        fwd = self._marginals[p].copy()
        ia = np.flatnonzero(has_a)
        fwd[ia] = self._powers[p[ia] - a[ia], seq[bi[ia], a[ia]], :]
        bwd = np.ones_like(fwd)
        ib = np.flatnonzero(has_b)
        bwd[ib] = self._powers[b[ib] - p[ib], :, seq[bi[ib], b[ib]]]
        w = fwd * bwd
        z = w.sum(axis=1)
        if np.any(z <= 0):
            j = int(np.flatnonzero(z <= 0)[0])
            raise InconsistencyError(
                f"masked answer position {int(ki[j])} has zero-probability context under the chain"
            )
        out[bi, ki] = w / z[:, None]
        return out

    def exact_posterior(self, state: GenState) -> DenoiserOutput:
        return DenoiserOutput(self.posterior_batch(state.prompt[None], state.answer[None])[0])

    # reward
    def is_valid(self, prompt, answer) -> bool:
        seq = np.concatenate([np.asarray(prompt, dtype=np.int64), np.asarray(answer, dtype=np.int64)])
        if np.any(seq >= self.V) or np.any(seq < 0):
            return False
        if self.spec.initial_dist[seq[0]] <= 0:
            return False
        return bool(np.all(self.spec.transition[seq[:-1], seq[1:]] > 0))

    def correctness(self, prompt, answer, reference=None) -> int:
        """Binary correctness; incomplete answers score 0."""
        answer = np.asarray(answer)
        if np.any(answer == self.mask_id):
            return 0
        if self.reward_mode == "exact_match":
            if reference is None:
                raise ConfigError("exact_match reward needs the reference answer")
            return int(np.array_equal(answer, reference))
        return int(self.is_valid(prompt, answer))


def build_env(spec: MarkovChainSpec, reward_mode: str = "validity") -> Environment:
    return Environment(spec, reward_mode)


def exact_posterior(env: Environment, state: GenState) -> DenoiserOutput:
    return env.exact_posterior(state)


def correctness(env: Environment, state: GenState, reference=None) -> int:
    return env.correctness(state.prompt, state.answer, reference)


def sample_task(env: Environment, rng):
    return env.sample_task(rng)


class ExactDenoiser:
    """The ideal MDM: exact chain posterior (no parameters to fit)."""

    def __init__(self, env: Environment):
        self.env = env

    def predict_proba(self, prompts, answers):
        return self.env.posterior_batch(prompts, answers)
