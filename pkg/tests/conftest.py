import sys

import numpy as np
import pytest

from unmaskrl.diffenv import ExactDenoiser, MarkovChainSpec, build_env


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_mode():
    return build_env(MarkovChainSpec.two_mode(prompt_len=0, answer_len=4))


@pytest.fixture
def cyclic():
    return build_env(MarkovChainSpec.cyclic(3, prompt_len=1, answer_len=4))


@pytest.fixture
def small_chain():
    spec = MarkovChainSpec.random(np.random.default_rng(7), vocab_size=3, prompt_len=1, answer_len=5, sparsity=0.3)
    return build_env(spec)


@pytest.fixture
def exact(small_chain):
    return ExactDenoiser(small_chain)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = sorted(getattr(mod, "RESULTS", []), key=lambda s: int(s.split()[2]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
