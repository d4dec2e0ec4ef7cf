"""Group rollout collection for GRPO."""
from __future__ import annotations

import numpy as np

from ..diffenv import RolloutSettings, run_rollouts
from ..heuristics import HeuristicSpec, expert_bits
from ..policy import PolicySampler, bernoulli_logprob, dpls_logprob, featurize, policy_forward
from .objective import (
    RolloutGroup,
    es_mixture_logprob,
    expert_order,
    step_matches_expert,
    trajectory_reward,
)


class ExpertSampler:
    """Deterministic heuristic expert used for expert-steered rollouts."""

    def __init__(self, spec: HeuristicSpec, mask_id: int, head_kind="bernoulli"):
        self.spec = spec
        self.mask_id = mask_id
        self.head_kind = head_kind

    def select(self, answers, dists, support, t_frac, rngs, fallback):
        conf = dists.max(axis=-1)
        bits = expert_bits(self.spec, answers == self.mask_id, conf) & support
        orders = [expert_order(b, c) for b, c in zip(bits, conf)] if self.head_kind == "dpls" else None
        return bits, orders, None


def policy_logprobs(params, arch, mask_id, steps, t_frac, tau_pi=1.0):
    """Log-likelihood of each recorded step's action under ``params``."""
    if not steps:
        return np.zeros(0)
    answers = np.stack([s.answer for s in steps])
    dists = np.stack([s.dists for s in steps])
    t_frac = np.asarray(t_frac, dtype=np.float64)
    b = policy_forward(params, featurize(answers, dists, mask_id, arch.top_n_conf), t_frac, arch)
    if arch.head_kind == "dpls":
        return np.array([dpls_logprob(b[i], tau_pi, s.order, s.support) for i, s in enumerate(steps)])
    return np.array([bernoulli_logprob(b[i], tau_pi, s.bits, s.support) for i, s in enumerate(steps)])


def collect_groups(env, denoiser, params, arch, prompts, cfg, rngs, references=None, expert_spec=None):
    """Roll out ``G`` policy members (plus one expert when steering) for every prompt.

    ``rngs[p][g]`` is the generator of member ``g`` of prompt ``p``. Transitions
    are greedy (tau=0), the policy samples at temperature 1, the fallback is
    off and the step cap is ``T = L``.
    Rewards are filled in; with steering every step's ``logprob`` is replaced
    by the mixture log-probability.
    """
    G = cfg.group_size
    P = len(prompts)
    settings = RolloutSettings(block_len=cfg.block_len, tau=0.0, fallback_on=False)
    flat_prompts = np.repeat(np.asarray(prompts, dtype=np.int64).reshape(P, env.d), G, axis=0)
    flat_refs = None if references is None else [references[p] for p in range(P) for _ in range(G)]
    flat_rngs = [rngs[p][g] for p in range(P) for g in range(G)]
    sampler = PolicySampler(params, arch, env.mask_id, 1.0)
    trajs = run_rollouts(env, denoiser, sampler, flat_prompts, settings, flat_rngs, flat_refs)
    members = [trajs[p * G : (p + 1) * G] for p in range(P)]
    if expert_spec is not None:
        ex = run_rollouts(
            env,
            denoiser,
            ExpertSampler(expert_spec, env.mask_id, arch.head_kind),
            np.asarray(prompts, dtype=np.int64).reshape(P, env.d),
            settings,
            [rngs[p][G] for p in range(P)],
            references,
        )
        for p in range(P):
            ex[p].expert = True
            members[p].append(ex[p])
        _attach_mixture_logprobs(params, arch, env.mask_id, members, expert_spec, cfg)
    groups = []
    for p in range(P):
        grp = RolloutGroup(np.asarray(prompts[p]), None if references is None else references[p], members[p])
        grp.rewards = np.array([trajectory_reward(m, cfg.alpha, cfg.reward_shape) for m in members[p]])
        groups.append(grp)
    return groups


def _attach_mixture_logprobs(params, arch, mask_id, members, expert_spec, cfg):
    pairs = [(s, m.T) for grp in members for m in grp if m.expert for s in m.steps]
    ex_steps = [s for s, _ in pairs]
    lp = policy_logprobs(params, arch, mask_id, ex_steps, [s.t / T for s, T in pairs])
    for s, v in zip(ex_steps, lp):
        s.logprob = float(v)
    for grp in members:
        for m in grp:
            for s in m.steps:
                match = step_matches_expert(s, expert_spec, mask_id, arch.head_kind)
                s.logprob = es_mixture_logprob(s.logprob, match, cfg.group_size, 1)


def collect_group(env, denoiser, params, arch, prompt, cfg, rng, reference=None, expert_spec=None) -> RolloutGroup:
    """Single-prompt wrapper around :func:`collect_groups`; member streams are spawned from ``rng``."""
    n = cfg.group_size + (1 if expert_spec is not None else 0)
    member_rngs = rng.spawn(n)
    refs = None if reference is None else [reference]
    return collect_groups(env, denoiser, params, arch, [prompt], cfg, [member_rngs], refs, expert_spec)[0]
