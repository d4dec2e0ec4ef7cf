"""The invariant battery behind the ``verify`` command."""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..diffenv import (
    ExactDenoiser,
    MarkovChainSpec,
    build_env,
    elbo_loss_graph,
    forward_mask,
    init_mdm,
    support_mask,
)
from ..gradkit import finite_difference_check
from ..gradkit.check import check_primitives
from ..grpo import TrainConfig, advantages, collect_group, flatten_groups, grpo_loss_graph, reward
from ..heuristics import RandomKSampler, ThresholdSampler, TopKSampler, threshold_with_fallback
from ..policy import (
    PolicyArch,
    bernoulli_logprob,
    bernoulli_logprob_graph,
    bernoulli_sample,
    dpls_logprob,
    dpls_logprob_graph,
    dpls_sample,
    init_policy,
    logits_graph,
)
from .oracle import enumerate_posterior

GRAD_TOL = 1e-4
NORM_TOL = 1e-9
TV_TOL = 0.01
POSTERIOR_TOL = 1e-12

TINY_ARCH = dict(n_blocks=1, hidden=16, ff=32, heads=2, time_embed_dim=8)


@dataclass
class Report:
    lines: list = field(default_factory=list)
    ok: bool = True

    def add(self, name, passed, detail=""):
        self.ok &= bool(passed)
        self.lines.append(f"{'PASS' if passed else 'FAIL'} {name}: {detail}".rstrip(": "))

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


# --- gradient checks -------------------------------------------------------------


def _tiny_policy(rng, head_kind):
    arch = PolicyArch(head_kind=head_kind, **TINY_ARCH)
    params = init_policy(arch, rng)
    # the zero output head would hide every upstream gradient
    params["out.w"] = rng.normal(0.0, 0.5, params["out.w"].shape)
    params["out.b"] = np.zeros(1)
    for k in params:
        if k.startswith("time.0.") or k.startswith("block0."):
            params[k] = params[k] + rng.normal(0.0, 0.05, params[k].shape)
    return arch, params


def policy_logprob_losses(seed=0, B=3, L=6):
    """Finite-difference cases for both heads' batched log-likelihoods."""
    rng = np.random.default_rng(seed)
    feats = np.concatenate([rng.uniform(0.3, 1.0, (B, L, 1)), (rng.random((B, L, 1)) < 0.7)], axis=-1)
    t_frac = rng.uniform(0.1, 1.0, B)
    support = feats[..., 1] > 0
    support[:, 0] = True
    bits = (rng.random((B, L)) < 0.5) & support
    orders = []
    for r in range(B):
        idx = rng.permutation(np.flatnonzero(support[r]))
        orders.append([int(k) for k in idx[: int(rng.integers(1, idx.size + 1))]])
    weights = np.random.default_rng(seed + 2).standard_normal(B)
    cases = {}
    for head in ("bernoulli", "dpls"):
        arch, params = _tiny_policy(np.random.default_rng(seed + 1), head)

        def loss(tape, arch=arch, head=head):
            z = logits_graph(tape, feats, t_frac, arch)
            if head == "dpls":
                lp = dpls_logprob_graph(tape, z, orders, support, 0.7)
            else:
                lp = bernoulli_logprob_graph(tape, z, bits, support, 0.7)
            return tape.sum(lp * weights)

        cases[f"policy_logprob[{head}]"] = (params, loss)
    return cases


def grpo_loss_case(seed=0, es=False):
    """A synthetic group on a small random chain, evaluated away from the sampling parameters."""
    rng = np.random.default_rng(seed)
    env = build_env(MarkovChainSpec.random(rng, vocab_size=3, prompt_len=1, answer_len=5, sparsity=0.3))
    arch, params = _tiny_policy(np.random.default_rng(seed + 3), "bernoulli")
    cfg = TrainConfig(group_size=4, alpha=1.0, es=es, reward_shape="additive")
    expert = cfg.expert_spec(env.L)
    prompt, ref = env.sample_task(rng)
    group = collect_group(env, ExactDenoiser(env), params, arch, prompt, cfg, rng, ref, expert)
    # synthetic rewards keep every advantage nonzero
    group.rewards = rng.normal(0.0, 1.0, len(group.members))
    batch = flatten_groups([group], arch, env.mask_id, expert_spec=expert)
    moved = params.copy()
    for k in moved:
        moved[k] = moved[k] + rng.normal(0.0, 0.002, moved[k].shape)
    es_arg = (cfg.group_size, 1) if es else None

    def loss(tape):
        return grpo_loss_graph(tape, batch, arch, cfg.clip_eps, es_arg)[0]

    return moved, loss


def elbo_case(seed=0):
    rng = np.random.default_rng(seed)
    env = build_env(MarkovChainSpec.random(rng, vocab_size=3, prompt_len=1, answer_len=4))
    params = init_mdm(rng, env.V, env.d + env.L, hidden=16, ff=32, heads=2, n_blocks=1)
    prompt, x0 = env.sample_tasks(4, rng)
    t = rng.uniform(0.2, 1.0, 4)
    xt = np.stack([forward_mask(x0[i], t[i], rng, env.mask_id) for i in range(4)])
    xt[:, 0] = env.mask_id
    batch = {"prompt": prompt, "x0": x0, "x_t": xt, "t": t}
    return params, lambda tape: elbo_loss_graph(tape, batch, env.mask_id, heads=2, n_blocks=1)


def gradient_errors(seed=0) -> dict:
    """Max relative finite-difference error of every model-level loss."""
    cases = dict(policy_logprob_losses(seed))
    cases["grpo_loss"] = grpo_loss_case(seed)
    cases["grpo_loss[es]"] = grpo_loss_case(seed, es=True)
    cases["elbo"] = elbo_case(seed)
    return {name: finite_difference_check(p, fn, seed=seed) for name, (p, fn) in cases.items()}


# --- likelihood checks --------------------------------------------------------------


def bernoulli_total_probability(L=12, seed=0, tau=1.0) -> float:
    rng = np.random.default_rng(seed)
    b = rng.normal(0.0, 2.0, L)
    sup = np.ones(L, dtype=bool)
    total = 0.0
    for code in range(1 << L):
        bits = np.array([(code >> j) & 1 for j in range(L)], dtype=bool)
        total += np.exp(bernoulli_logprob(b, tau, bits, sup))
    return total


def dpls_total_probability(n=5, seed=0, tau=1.0, L=None) -> float:
    rng = np.random.default_rng(seed)
    L = L or n + 2
    b = rng.normal(0.0, 2.0, L)
    sup = np.zeros(L, dtype=bool)
    sup[rng.choice(L, n, replace=False)] = True
    idx = np.flatnonzero(sup)
    total = 0.0
    for k in range(1, n + 1):
        for order in itertools.permutations(idx, k):
            total += np.exp(dpls_logprob(b, tau, order, sup))
    return total


def sampler_tv(head, n_draws=100_000, seed=0, size=3, tau=1.0) -> float:
    """Total variation between empirical sample frequencies and ``exp(logprob)``."""
    rng = np.random.default_rng(seed)
    b = rng.normal(0.0, 1.0, size)
    sup = np.ones(size, dtype=bool)
    counts = Counter()
    for _ in range(n_draws):
        if head == "dpls":
            counts[tuple(dpls_sample(b, tau, sup, rng).order)] += 1
        else:
            counts[tuple(bernoulli_sample(b, tau, sup, rng).bits)] += 1
    if head == "dpls":
        outcomes = [o for k in range(1, size + 1) for o in itertools.permutations(range(size), k)]
        probs = {o: np.exp(dpls_logprob(b, tau, o, sup)) for o in outcomes}
    else:
        outcomes = [tuple(bool((c >> j) & 1) for j in range(size)) for c in range(1 << size)]
        probs = {o: np.exp(bernoulli_logprob(b, tau, np.array(o), sup)) for o in outcomes}
    return 0.5 * sum(abs(counts[o] / n_draws - probs[o]) for o in outcomes)


# --- environment checks --------------------------------------------------------------


def random_specs(n, seed=0, max_L=8, max_V=4):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        V = int(rng.integers(2, max_V + 1))
        L = int(rng.integers(1, max_L + 1))
        d = int(rng.integers(0, 3))
        out.append(MarkovChainSpec.random(rng, vocab_size=V, prompt_len=d, answer_len=L, sparsity=0.3))
    return out


def posterior_deviation(spec, seed=0, max_patterns=None) -> float:
    """Max |exact - enumerated| over every mask pattern of one sampled sequence."""
    env = build_env(spec)
    rng = np.random.default_rng(seed)
    prompt, x0 = env.sample_task(rng)
    den = ExactDenoiser(env)
    L = env.L
    codes = range(1, 1 << L)
    worst = 0.0
    for n, code in enumerate(codes):
        if max_patterns is not None and n >= max_patterns:
            break
        ans = x0.copy()
        ans[[(code >> j) & 1 == 1 for j in range(L)]] = env.mask_id
        exact = den.predict_proba(prompt[None], ans[None])[0]
        worst = max(worst, float(np.abs(exact - enumerate_posterior(env, prompt, ans)).max()))
    return worst


def reward_dichotomy() -> bool:
    """All-wrong group: multiplicative advantages vanish, additive ones favour the fastest member."""
    T, used = 16, [2, 5, 9, 16]
    mult = advantages([reward(0, T, T - n, 1.0, "multiplicative") for n in used])
    add = advantages([reward(0, T, T - n, 1.0, "additive") for n in used])
    return bool(np.all(mult == 0.0) and add[0] > 0 and add[0] == add.max() and np.sum(add > 0) >= 1)


def semi_ar_containment(n_states=1000, seed=0) -> bool:
    """No sampler touches positions outside the active block, on random states."""
    rng = np.random.default_rng(seed)
    samplers = [RandomKSampler(k=3), TopKSampler(k=2), ThresholdSampler(lam=0.5)]
    for i in range(n_states):
        L = int(rng.choice([4, 8, 12, 16]))
        bl = int(rng.choice([b for b in (1, 2, 4) if L % b == 0]))
        masked = rng.random(L) < rng.uniform(0.1, 1.0)
        if not masked.any():
            masked[rng.integers(L)] = True
        sup = support_mask(masked[None], bl)
        start = (np.flatnonzero(masked)[0] // bl) * bl
        block = np.zeros(L, dtype=bool)
        block[start : start + bl] = True
        dists = rng.dirichlet(np.ones(3), size=(1, L))
        for s in samplers:
            bits, _, _ = s.select(None, dists, sup, 1.0, [rng], True)
            if np.any(bits[0] & ~(block & masked)):
                return False
    return True


def fallback_unmasks_one(n_states=1000, seed=0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(n_states):
        L = int(rng.integers(1, 17))
        masked = rng.random(L) < 0.6
        if not masked.any():
            masked[0] = True
        conf = rng.uniform(0.0, 0.5, L)
        if threshold_with_fallback(conf, masked, 0.5).size != 1:
            return False
        b = np.full(L, -50.0)
        rec = bernoulli_sample(b, 1.0, masked, rng, fallback=True)
        if int(rec.bits.sum()) != 1 or not rec.fallback_used:
            return False
    return True


def verify_suite(seed=0, n_specs=20, quick=False) -> Report:
    """Run the full battery; ``quick`` trims the sample sizes for smoke runs."""
    rep = Report()
    for name, err in check_primitives(seed).items():
        rep.add(f"gradient[{name}]", err < GRAD_TOL, f"max rel err {err:.3e}")
    for name, err in gradient_errors(seed).items():
        rep.add(f"gradient[{name}]", err < GRAD_TOL, f"max rel err {err:.3e}")
    tot = bernoulli_total_probability(12, seed)
    rep.add("normalization[bernoulli,L=12]", abs(tot - 1) < NORM_TOL, f"|sum p - 1| = {abs(tot - 1):.3e}")
    tot = dpls_total_probability(5, seed)
    rep.add("normalization[dpls,n=5]", abs(tot - 1) < NORM_TOL, f"|sum p - 1| = {abs(tot - 1):.3e}")
    # the TV bound is only meaningful at the full draw count
    draws = 100_000
    for head in ("bernoulli", "dpls"):
        tv = sampler_tv(head, draws, seed)
        rep.add(f"sampler_consistency[{head}]", tv < TV_TOL, f"TV {tv:.4f} over {draws} draws")
    worst = max(posterior_deviation(s, seed) for s in random_specs(5 if quick else n_specs, seed))
    rep.add("posterior_vs_enumeration", worst < POSTERIOR_TOL, f"max abs dev {worst:.3e}")
    rep.add("reward_hacking_dichotomy", reward_dichotomy())
    rep.add("semi_ar_containment", semi_ar_containment(200 if quick else 1000, seed))
    rep.add("fallback_termination", fallback_unmasks_one(200 if quick else 1000, seed))
    return rep


__all__ = [
    "Report",
    "bernoulli_total_probability",
    "dpls_total_probability",
    "elbo_case",
    "fallback_unmasks_one",
    "gradient_errors",
    "grpo_loss_case",
    "policy_logprob_losses",
    "posterior_deviation",
    "random_specs",
    "reward_dichotomy",
    "sampler_tv",
    "semi_ar_containment",
    "verify_suite",
]
