"""Rewards, group advantages, expert-steering likelihoods and the clipped GRPO loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, NumericalError
from ..heuristics import HeuristicSpec, expert_bits
from ..policy import bernoulli_logprob_graph, dpls_logprob_graph, featurize, logits_graph


def reward(r, T, T_hat, alpha, shape="multiplicative") -> float:
    """Terminal reward for ``T - T_hat`` steps used out of ``T``."""
    if not 0 <= T_hat <= T:
        raise ContractError(f"T_hat={T_hat} outside [0, {T}]")
    used = (T - T_hat) / T
    if shape == "multiplicative":
        return float(r) * (1.0 - used) ** alpha
    if shape == "additive":
        return float(r) - alpha * used
    raise ContractError(f"unknown reward shape {shape!r}")


def trajectory_reward(traj, alpha, shape="multiplicative") -> float:
    """Incomplete rollouts score with correctness 0 and the full step budget."""
    if not traj.complete:
        return reward(0, traj.T, 0, alpha, shape)
    return reward(traj.correct, traj.T, traj.T - traj.nfe, alpha, shape)


def advantages(rewards) -> np.ndarray:
    """Group-mean-centred rewards (no standard-deviation scaling)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ContractError("a group needs at least two members")
    return r - r.mean()


@dataclass
class RolloutGroup:
    prompt: np.ndarray
    reference: np.ndarray | None
    members: list
    rewards: np.ndarray = field(default=None)

    @property
    def n_expert(self):
        return sum(m.expert for m in self.members)

    @property
    def n_policy(self):
        return len(self.members) - self.n_expert


def mixture_weights(G, E):
    return G / (G + E), E / (G + E)


def es_mixture_logprob(policy_logprob, matches_expert, G, E=1) -> float:
    """``log(G/(G+E) * pi(u) + E/(G+E) * 1[u == expert(state)])``."""
    wp, we = mixture_weights(G, E)
    if matches_expert:
        return float(np.logaddexp(math.log(wp) + policy_logprob, math.log(we)))
    return math.log(wp) + policy_logprob


def es_mixture_logprob_graph(tape, lp, matches, G, E=1):
    wp, we = mixture_weights(G, E)
    m = np.asarray(matches, dtype=np.float64)
    mixed = tape.log(tape.exp(lp) * wp + we)
    return mixed * m + (lp + math.log(wp)) * (1.0 - m)


def expert_order(bits, confidences):
    """Deterministic DPLS ordering of an expert's set: descending confidence, then index."""
    idx = np.flatnonzero(bits)
    return [int(k) for k in idx[np.argsort(-confidences[idx], kind="stable")]]


def step_matches_expert(step, expert_spec: HeuristicSpec, mask_id, head_kind):
    """Does the recorded action equal the expert's action at the recorded state?"""
    conf = step.dists.max(axis=-1)
    eb = expert_bits(expert_spec, (step.answer == mask_id)[None], conf[None])[0] & step.support
    if head_kind == "dpls":
        return step.order == expert_order(eb, conf)
    return bool(np.array_equal(eb, step.bits))


@dataclass
class StepBatch:
    """Flattened recorded steps of one or more groups."""

    features: np.ndarray
    t_frac: np.ndarray
    support: np.ndarray
    bits: np.ndarray
    orders: list
    lp_old: np.ndarray
    adv: np.ndarray
    weight: np.ndarray
    matches: np.ndarray
    index: list  # (group, member, step) per row


def flatten_groups(groups, arch, mask_id, n_groups=None, expert_spec=None):
    """Collect every step of every member; each step's weight is 1/(n_groups * |group| * steps)."""
    n_groups = len(groups) if n_groups is None else n_groups
    rows = []
    for gi, grp in enumerate(groups):
        adv = advantages(grp.rewards)
        for mi, traj in enumerate(grp.members):
            n_steps = max(traj.nfe, 1)
            for si, st in enumerate(traj.steps):
                match = (
                    step_matches_expert(st, expert_spec, mask_id, arch.head_kind) if expert_spec is not None else False
                )
                w = 1.0 / (n_groups * len(grp.members) * n_steps)
                rows.append((gi, mi, si, st, traj.T, adv[mi], w, match))
    if not rows:
        return None
    answers = np.stack([r[3].answer for r in rows])
    dists = np.stack([r[3].dists for r in rows])
    return StepBatch(
        features=featurize(answers, dists, mask_id, arch.top_n_conf),
        t_frac=np.array([r[3].t / r[4] for r in rows]),
        support=np.stack([r[3].support for r in rows]),
        bits=np.stack([r[3].bits for r in rows]),
        orders=[r[3].order for r in rows],
        lp_old=np.array([r[3].logprob for r in rows], dtype=np.float64),
        adv=np.array([r[5] for r in rows]),
        weight=np.array([r[6] for r in rows]),
        matches=np.array([r[7] for r in rows], dtype=bool),
        index=[(r[0], r[1], r[2]) for r in rows],
    )


def new_logprob_graph(tape, batch: StepBatch, arch, es=None, tau_pi=1.0):
    logits = logits_graph(tape, batch.features, batch.t_frac, arch)
    if arch.head_kind == "dpls":
        lp = dpls_logprob_graph(tape, logits, batch.orders, batch.support, tau_pi)
    else:
        lp = bernoulli_logprob_graph(tape, logits, batch.bits, batch.support, tau_pi)
    if es is not None:
        G, E = es
        lp = es_mixture_logprob_graph(tape, lp, batch.matches, G, E)
    return lp


def grpo_loss_graph(tape, batch: StepBatch, arch, clip_eps, es=None, tau_pi=1.0):
    """Negative clipped surrogate; returns ``(loss_node, n_clipped)``.

    ``es=(G, E)`` switches both likelihoods to the expert-steering mixture
    (``batch.lp_old`` must already be mixture log-probabilities).
    """
    lp = new_logprob_graph(tape, batch, arch, es, tau_pi)
    diff = lp.value - batch.lp_old
    if not np.all(np.isfinite(diff)):
        gi, mi, si = batch.index[int(np.flatnonzero(~np.isfinite(diff))[0])]
        raise NumericalError(f"non-finite importance ratio (group {gi}, trajectory {mi}, step {si})")
    ratio = tape.exp(lp + (-batch.lp_old))
    rho = ratio.value
    A = batch.adv
    clipped = np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_branch = rho * A <= clipped * A
    keep = unclipped_branch.astype(np.float64)
    surrogate = ratio * (A * batch.weight * keep) + (clipped * A * batch.weight * (1.0 - keep))
    n_clipped = int(np.sum(~unclipped_branch))
    return -tape.sum(surrogate), n_clipped
