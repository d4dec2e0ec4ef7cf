"""The GRPO training loop and its configuration."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..diffenv import RolloutSettings, run_rollouts
from ..errors import ConfigError, NumericalError
from ..gradkit import ParamStore, Tape, save_checkpoint
from ..heuristics import HeuristicSpec
from ..policy import PolicyArch, PolicySampler, init_policy
from ..seeding import stream
from .objective import flatten_groups, grpo_loss_graph
from .optim import OptState, learning_rate, optimizer_step
from .rollouts import collect_groups

log = logging.getLogger(__name__)

METRICS_HEADER = "step,mean_reward,mean_correct,mean_steps,lr,grad_norm,clip_frac"
MAX_BAD_STEPS = 5


@dataclass
class TrainConfig:
    lr: float = 3e-5
    schedule: str = "cosine"
    warmup_steps: int = 100
    batch_prompts: int = 16
    weight_decay: float = 0.1
    max_grad_norm: float = 0.2
    clip_eps: float | None = None  # 0.5, or 0.2 with expert steering
    group_size: int = 8
    kl_beta: float = 0.0
    epochs: int = 1
    alpha: float = 1.0
    reward_shape: str = "multiplicative"
    es: bool = False
    es_kind: str = "threshold"
    es_lambda: float = 0.9
    es_k: int = 1
    es_block_len: int | None = None  # None: L // 8
    n_prompts: int = 1600
    block_len: int | None = None
    checkpoint_every: int = 50
    loss_chunk: int = 4
    rollout_workers: int = 1

    def __post_init__(self):
        if self.clip_eps is None:
            self.clip_eps = 0.2 if self.es else 0.5
        self.validate()

    def validate(self):
        checks = [
            ("lr", self.lr > 0, "must be > 0"),
            ("schedule", self.schedule in ("cosine", "constant"), "must be cosine or constant"),
            ("warmup_steps", self.warmup_steps >= 0, "must be >= 0"),
            ("batch_prompts", self.batch_prompts >= 1, "must be >= 1"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("max_grad_norm", self.max_grad_norm > 0, "must be > 0"),
            ("clip_eps", 0 < self.clip_eps < 1, "must lie in (0, 1)"),
            ("group_size", self.group_size >= 2, "must be >= 2"),
            ("kl_beta", self.kl_beta == 0, "must be 0 (no KL term)"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("alpha", self.alpha >= 0 and math.isfinite(self.alpha), "must be a finite real >= 0"),
            ("reward_shape", self.reward_shape in ("multiplicative", "additive"), "must be multiplicative or additive"),
            ("es_kind", self.es_kind in ("threshold", "top_k"), "must be threshold or top_k"),
            ("es_lambda", 0 < self.es_lambda <= 1, "must lie in (0, 1]"),
            ("es_k", self.es_k >= 1, "must be >= 1"),
            ("n_prompts", self.n_prompts >= 1, "must be >= 1"),
            ("checkpoint_every", self.checkpoint_every >= 1, "must be >= 1"),
            ("loss_chunk", self.loss_chunk >= 1, "must be >= 1"),
            ("rollout_workers", self.rollout_workers == 1, "only 1 is supported"),
        ]
        for key, ok, why in checks:
            if not ok:
                raise ConfigError(f"train.{key}={getattr(self, key)!r} {why}")

    @property
    def total_steps(self):
        return math.ceil(self.n_prompts * self.epochs / self.batch_prompts)

    def expert_spec(self, L) -> HeuristicSpec | None:
        if not self.es:
            return None
        bl = self.es_block_len if self.es_block_len is not None else max(1, L // 8)
        if L % bl:
            raise ConfigError(f"train.es_block_len={bl} must divide the answer length {L}")
        return HeuristicSpec(self.es_kind, K=self.es_k, lam=self.es_lambda, block_len=bl)


def loss_and_grads(params, groups, arch, cfg: TrainConfig, mask_id, expert_spec=None):
    """Clipped GRPO loss over a batch of groups and its gradient.

    Groups with all-zero advantages contribute nothing and are skipped; the
    rest are processed ``cfg.loss_chunk`` groups at a time so the tape stays
    small. Returns ``(loss, grads, clip_fraction)``.
    """
    es = (cfg.group_size, 1) if expert_spec is not None else None
    live = [g for g in groups if np.any(g.rewards != g.rewards.mean())]
    total = 0.0
    grads = params.zeros_like()
    n_rows = n_clipped = 0
    for c in range(0, len(live), cfg.loss_chunk):
        batch = flatten_groups(live[c : c + cfg.loss_chunk], arch, mask_id, len(groups), expert_spec)
        if batch is None:
            continue
        tape = Tape(params)
        loss, clipped = grpo_loss_graph(tape, batch, arch, cfg.clip_eps, es)
        total += float(loss.value)
        for k, g in tape.backward(loss).items():
            grads[k] = grads[k] + g
        n_rows += len(batch.lp_old)
        n_clipped += clipped
    return total, grads, (n_clipped / n_rows if n_rows else 0.0)


def grpo_loss(params, groups, arch, cfg: TrainConfig, mask_id, expert_spec=None) -> float:
    return loss_and_grads(params, groups, arch, cfg, mask_id, expert_spec)[0]


def _fmt(x) -> str:
    return f"{float(x):.10g}"


@dataclass
class TrainResult:
    params: ParamStore
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def train(env, denoiser, arch: PolicyArch, cfg: TrainConfig, seed: int, out_dir=None, params=None, meta=None):
    """Run GRPO; writes ``metrics.csv`` and checkpoints under ``out_dir`` when given."""
    rng_tasks = stream(seed, "tasks")
    if params is None:
        params = init_policy(arch, stream(seed, "init"))
    prompts, refs = env.sample_tasks(cfg.n_prompts, rng_tasks)
    order = np.concatenate([stream(seed, "epoch", e).permutation(cfg.n_prompts) for e in range(cfg.epochs)])
    expert_spec = cfg.expert_spec(env.L)
    state = OptState.zeros(params)
    result = TrainResult(params)
    n_steps = cfg.total_steps
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(metrics_path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
    base_meta = {"arch": arch.to_dict(), "seed": int(seed), "alpha": cfg.alpha, "L": env.L}
    base_meta.update(meta or {})
    bad = 0
    for step in range(1, n_steps + 1):
        idx = order[(step - 1) * cfg.batch_prompts : step * cfg.batch_prompts]
        n_members = cfg.group_size + (1 if expert_spec is not None else 0)
        rngs = [[stream(seed, "rollout", int(p), g) for g in range(n_members)] for p in idx]
        groups = collect_groups(
            env, denoiser, params, arch, prompts[idx], cfg, rngs, [refs[p] for p in idx], expert_spec
        )
        lr = learning_rate(step, cfg.lr, cfg.warmup_steps, n_steps, cfg.schedule)
        try:
            loss, grads, clip_frac = loss_and_grads(params, groups, arch, cfg, env.mask_id, expert_spec)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}")
        except NumericalError as exc:
            bad += 1
            log.warning("step %d: %s", step, exc)
            if bad > MAX_BAD_STEPS:
                raise NumericalError(f"aborting after {bad} consecutive non-finite losses (step {step})") from exc
            grad_norm, clip_frac = float("nan"), float("nan")
        else:
            bad = 0
            params, state, grad_norm = optimizer_step(
                params, grads, state, lr=lr, weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm
            )
        pol = [m for g in groups for m in g.members if not m.expert]
        rewards = [r for g in groups for m, r in zip(g.members, g.rewards) if not m.expert]
        row = {
            "step": step,
            "mean_reward": float(np.mean(rewards)),
            "mean_correct": float(np.mean([m.correct for m in pol])),
            "mean_steps": float(np.mean([m.nfe for m in pol])),
            "lr": lr,
            "grad_norm": grad_norm,
            "clip_frac": clip_frac,
        }
        result.metrics.append(row)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(",".join([str(step)] + [_fmt(row[k]) for k in METRICS_HEADER.split(",")[1:]]) + "\n")
        if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == n_steps):
            name = "final.uprl" if step == n_steps else f"step_{step:06d}.uprl"
            path = os.path.join(out_dir, name)
            save_checkpoint(path, params, {**base_meta, "step": step})
            result.checkpoints.append(path)
    result.params = params
    return result


class UnmaskingPolicy(BaseEstimator):
    """GRPO-trained unmasking policy with a scikit-learn style interface.

    ``fit(env, denoiser)`` trains; ``predict(env, denoiser, prompts)`` decodes
    answers with the learned policy (greedy commits, fallback on).
    """

    def __init__(self, arch=None, train_config=None, tau_pi=1.0, block_len=None, random_state=0):
        self.arch = arch
        self.train_config = train_config
        self.tau_pi = tau_pi
        self.block_len = block_len
        self.random_state = random_state

    def fit(self, env, denoiser=None, out_dir=None):
        from ..diffenv import ExactDenoiser

        arch = self.arch or PolicyArch()
        cfg = self.train_config or TrainConfig()
        denoiser = denoiser if denoiser is not None else ExactDenoiser(env)
        res = train(env, denoiser, arch, cfg, self.random_state, out_dir=out_dir)
        self.arch_ = arch
        self.params_ = res.params
        self.metrics_ = res.metrics
        return self

    def sampler(self, mask_id):
        check_is_fitted(self, "params_")
        return PolicySampler(self.params_, self.arch_, mask_id, self.tau_pi)

    def rollouts(self, env, denoiser, prompts, rngs=None, references=None):
        prompts = np.asarray(prompts).reshape(-1, env.d)
        if rngs is None:
            rngs = [stream(self.random_state, "predict", i) for i in range(len(prompts))]
        settings = RolloutSettings(block_len=self.block_len, tau=0.0, fallback_on=True)
        return run_rollouts(env, denoiser, self.sampler(env.mask_id), prompts, settings, rngs, references)

    def predict(self, env, denoiser, prompts):
        return np.stack([tr.answer for tr in self.rollouts(env, denoiser, prompts)])


