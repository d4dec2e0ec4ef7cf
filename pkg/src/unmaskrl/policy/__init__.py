"""Learnable unmasking policy: features, network, and action heads."""
from __future__ import annotations

import numpy as np

from .heads import (
    ActionRecord,
    bernoulli_logprob,
    bernoulli_logprob_graph,
    bernoulli_sample,
    dpls_logprob,
    dpls_logprob_graph,
    dpls_sample,
)
from .network import PolicyArch, featurize, init_policy, logits_graph, policy_forward


class PolicySampler:
    """Adapter that lets a frozen policy drive :func:`run_rollouts`."""

    def __init__(self, params, arch: PolicyArch, mask_id: int, tau_pi: float = 1.0):
        self.params = params
        self.arch = arch
        self.mask_id = mask_id
        self.tau_pi = tau_pi

    def select(self, answers, dists, support, t_frac, rngs, fallback):
        feats = featurize(answers, dists, self.mask_id, self.arch.top_n_conf)
        b = policy_forward(self.params, feats, t_frac, self.arch)
        bits = np.zeros_like(support, dtype=bool)
        orders = [] if self.arch.head_kind == "dpls" else None
        lps = np.zeros(len(support))
        for i in range(len(support)):
            if self.arch.head_kind == "dpls":
                rec = dpls_sample(b[i], self.tau_pi, support[i], rngs[i])
                orders.append(rec.order)
            else:
                rec = bernoulli_sample(b[i], self.tau_pi, support[i], rngs[i], fallback=fallback)
            bits[i] = rec.bits
            lps[i] = rec.logprob_old
        return bits, orders, lps


__all__ = [
    "ActionRecord",
    "PolicyArch",
    "PolicySampler",
    "bernoulli_logprob",
    "bernoulli_logprob_graph",
    "bernoulli_sample",
    "dpls_logprob",
    "dpls_logprob_graph",
    "dpls_sample",
    "featurize",
    "init_policy",
    "logits_graph",
    "policy_forward",
]
