"""Training-free unmasking heuristics.

The module-level functions work on a single state (1-d arrays of
confidences and masked positions). The estimator classes wrap them with a
batched ``select`` for the rollout loop and expose their knobs through
``get_params`` so parameter grids can be swept with scikit-learn tooling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .diffenv.chain import DenoiserOutput, GenState, support_mask
from .errors import ConfigError

KINDS = ("random_k", "top_k", "threshold")


def _positions(masked):
    masked = np.asarray(masked)
    if masked.dtype == bool:
        return np.flatnonzero(masked)
    return np.sort(masked.astype(np.int64))


def random_k(masked, k: int, rng) -> np.ndarray:
    """``min(k, |masked|)`` masked positions chosen uniformly without replacement."""
    pos = _positions(masked)
    n = min(int(k), pos.size)
    return np.sort(rng.choice(pos, size=n, replace=False))


def top_k_confidence(confidences, masked, k: int) -> np.ndarray:
    """The ``k`` most confident masked positions; ties go to the lower index."""
    pos = _positions(masked)
    conf = np.asarray(confidences)[pos]
    order = np.argsort(-conf, kind="stable")
    return np.sort(pos[order[: min(int(k), pos.size)]])


def threshold_with_fallback(confidences, masked, lam: float) -> np.ndarray:
    """Masked positions with confidence strictly above ``lam``.

    If none qualifies, the single most confident masked position (lowest
    index on ties) is returned so decoding always progresses.
    """
    pos = _positions(masked)
    if pos.size == 0:
        return pos
    conf = np.asarray(confidences)[pos]
    hit = pos[conf > lam]
    if hit.size:
        return hit
    return pos[[int(np.argmax(conf))]]


@dataclass
class HeuristicSpec:
    kind: str
    K: int = 1
    lam: float = 0.9
    block_len: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown heuristic kind {self.kind!r}; expected one of {KINDS}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0 < self.lam <= 1:
            raise ConfigError("lambda must lie in (0, 1]")

    def make(self):
        if self.kind == "random_k":
            return RandomKSampler(k=self.K)
        if self.kind == "top_k":
            return TopKSampler(k=self.K)
        return ThresholdSampler(lam=self.lam)


class _Heuristic(BaseEstimator):
    deterministic = True

    def fit(self, env=None, y=None):
        return self

    def _choose(self, conf, support_row, rng):
        raise NotImplementedError

    def select(self, answers, dists, support, t_frac, rngs, fallback=True):
        conf = dists.max(axis=-1)
        bits = np.zeros_like(support, dtype=bool)
        for i in range(len(support)):
            if support[i].any():
                bits[i, self._choose(conf[i], support[i], rngs[i])] = True
        return bits, None, None


class RandomKSampler(_Heuristic):
    deterministic = False

    def __init__(self, k=8):
        self.k = k

    def _choose(self, conf, support_row, rng):
        return random_k(support_row, self.k, rng)


class TopKSampler(_Heuristic):
    def __init__(self, k=8):
        self.k = k

    def _choose(self, conf, support_row, rng):
        return top_k_confidence(conf, support_row, self.k)


class ThresholdSampler(_Heuristic):
    def __init__(self, lam=0.9):
        self.lam = lam

    def _choose(self, conf, support_row, rng):
        return threshold_with_fallback(conf, support_row, self.lam)


def expert_action(spec: HeuristicSpec, state: GenState, denoiser_output: DenoiserOutput) -> np.ndarray:
    """Deterministic full-length action of a heuristic, confined to its own active block."""
    return expert_bits(spec, state.masked[None], denoiser_output.confidences[None])[0]


def expert_bits(spec: HeuristicSpec, masked, confidences) -> np.ndarray:
    """Batched :func:`expert_action` on mask patterns and confidences."""
    if spec.kind == "random_k":
        raise ConfigError("a randomized heuristic cannot serve as a deterministic expert")
    sup = support_mask(masked, spec.block_len)
    sampler = spec.make()
    bits = np.zeros_like(sup)
    for i in range(len(sup)):
        if sup[i].any():
            bits[i, sampler._choose(confidences[i], sup[i], None)] = True
    return bits


def default_k_grid(L: int) -> list[int]:
    """K in {8, ..., 256} rescaled from length 256 to ``L``."""
    return sorted({max(1, int(round(k * L / 256))) for k in (8, 16, 32, 64, 128, 256)})


DEFAULT_LAMBDA_GRID = [round(0.1 * i, 1) for i in range(1, 11)]
