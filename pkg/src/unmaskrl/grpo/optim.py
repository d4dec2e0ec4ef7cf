"""Optimizer used by GRPO (shared with the MDM trainer)."""
from ..optim import ADAM_EPS, BETA1, BETA2, OptState, clip_by_global_norm, learning_rate, optimizer_step

__all__ = ["ADAM_EPS", "BETA1", "BETA2", "OptState", "clip_by_global_norm", "learning_rate", "optimizer_step"]
