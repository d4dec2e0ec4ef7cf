"""GRPO training of unmasking policies."""
from .objective import (
    RolloutGroup,
    StepBatch,
    advantages,
    es_mixture_logprob,
    es_mixture_logprob_graph,
    expert_order,
    flatten_groups,
    grpo_loss_graph,
    reward,
    step_matches_expert,
    trajectory_reward,
)
from .optim import OptState, clip_by_global_norm, learning_rate, optimizer_step
from .rollouts import ExpertSampler, collect_group, collect_groups, policy_logprobs
from .trainer import METRICS_HEADER, TrainConfig, TrainResult, UnmaskingPolicy, grpo_loss, loss_and_grads, train

__all__ = [name for name in dir() if not name.startswith("_")]
