import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from unmaskrl.diffenv import DenoiserOutput, GenState, support_mask
from unmaskrl.errors import ConfigError
from unmaskrl.heuristics import (
    HeuristicSpec,
    RandomKSampler,
    ThresholdSampler,
    TopKSampler,
    default_k_grid,
    expert_action,
    random_k,
    threshold_with_fallback,
    top_k_confidence,
)

# the worked examples below use 1-based positions; arrays are 0-based


def test_random_k_takes_everything_when_k_covers(rng):
    assert random_k(np.arange(5), 5, rng).tolist() == [0, 1, 2, 3, 4]


def test_random_k_clamps_to_masked(rng):
    assert random_k(np.array([2]), 8, rng).tolist() == [2]


def test_random_k_pairs_are_uniform():
    rng = np.random.default_rng(0)
    n = 100_000
    counts = Counter(tuple(random_k(np.arange(4), 2, rng)) for _ in range(n))
    assert set(counts) == set(itertools.combinations(range(4), 2))
    for c in counts.values():
        assert abs(c / n - 1 / 6) < 0.01


def test_top_k_examples():
    assert top_k_confidence([0.9, 0.5, 0.7], np.arange(3), 2).tolist() == [0, 2]
    assert top_k_confidence([0.5, 0.5, 0.5], np.arange(3), 1).tolist() == [0]
    assert top_k_confidence([0.2, 0.5, 0.1], np.arange(3), 3).tolist() == [0, 1, 2]


def test_threshold_examples():
    assert threshold_with_fallback([0.95, 0.4, 0.97], np.arange(3), 0.9).tolist() == [0, 2]
    assert threshold_with_fallback([0.4, 0.3], np.arange(2), 0.9).tolist() == [0]
    # nothing can exceed 1
    assert threshold_with_fallback([1.0, 1.0, 0.3], np.arange(3), 1.0).tolist() == [0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=16))
def test_tiny_threshold_unmasks_everything(conf):
    conf = np.maximum(np.array(conf), 1e-6)
    out = threshold_with_fallback(conf, np.arange(conf.size), 1e-9)
    assert out.tolist() == list(range(conf.size))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=16), st.floats(0.01, 1.0))
def test_threshold_never_empty(conf, lam):
    assert threshold_with_fallback(np.array(conf), np.arange(len(conf)), lam).size >= 1


def test_spec_validation():
    with pytest.raises(ConfigError):
        HeuristicSpec("greedy")
    with pytest.raises(ConfigError):
        HeuristicSpec("top_k", K=0)
    with pytest.raises(ConfigError):
        HeuristicSpec("threshold", lam=1.5)


def _state(L, block_len, mask_id=2):
    return GenState(np.zeros(0), np.full(L, mask_id), L, block_len=block_len, mask_id=mask_id)


def test_random_expert_rejected():
    with pytest.raises(ConfigError):
        expert_action(HeuristicSpec("random_k", K=2), _state(4, None), DenoiserOutput(np.full((4, 2), 0.5)))


def test_expert_confined_to_block(rng):
    L = 64
    out = DenoiserOutput(rng.dirichlet(np.ones(2), L))
    bits = expert_action(HeuristicSpec("threshold", lam=0.01, block_len=32), _state(L, None), out)
    assert bits[:32].all() and not bits[32:].any()


def test_expert_fallback_sets_one_bit():
    out = DenoiserOutput(np.full((8, 2), 0.5))
    bits = expert_action(HeuristicSpec("threshold", lam=0.9, block_len=4), _state(8, None), out)
    assert bits.sum() == 1


def test_expert_is_deterministic(rng):
    out = DenoiserOutput(rng.dirichlet(np.ones(3), 16))
    spec = HeuristicSpec("top_k", K=3, block_len=8)
    a = expert_action(spec, _state(16, None, 3), out)
    b = expert_action(spec, _state(16, None, 3), out)
    assert np.array_equal(a, b)


def test_samplers_are_sklearn_estimators():
    s = clone(TopKSampler(k=3)).set_params(k=5)
    assert s.get_params() == {"k": 5}
    assert ThresholdSampler(lam=0.3).fit() is not None
    assert RandomKSampler().get_params()["k"] == 8


def test_default_k_grid_scales():
    assert default_k_grid(256) == [8, 16, 32, 64, 128, 256]
    assert default_k_grid(16)[-1] == 16
    assert default_k_grid(16)[0] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batched_select_stays_in_block(seed):
    rng = np.random.default_rng(seed)
    L, bl = 12, 4
    masked = rng.random((3, L)) < 0.6
    masked[:, -1] = True
    sup = support_mask(masked, bl)
    dists = rng.dirichlet(np.ones(3), size=(3, L))
    for s in (RandomKSampler(k=2), TopKSampler(k=2), ThresholdSampler(lam=0.6)):
        bits, _, _ = s.select(None, dists, sup, 1.0, [rng] * 3)
        assert not np.any(bits & ~sup)
        assert np.all(bits.any(axis=1))
