"""Synthetic diffusion environment: data chains, denoisers, transitions, rollouts."""
from .chain import (
    DenoiserOutput,
    Environment,
    ExactDenoiser,
    GenState,
    MarkovChainSpec,
    active_block,
    build_env,
    correctness,
    exact_posterior,
    sample_task,
    support_mask,
)
from .mdm import TinyMDM, elbo_loss, elbo_loss_graph, init_mdm, train_mdm
from .process import (
    OnePerStep,
    RolloutSettings,
    StepRecord,
    Trajectory,
    UnmaskAll,
    commit_tokens,
    forward_mask,
    rollout,
    run_rollouts,
    transition,
)

__all__ = [name for name in dir() if not name.startswith("_")]
