"""A tiny masked diffusion model trained with the masked-token ELBO."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .. import layers
from ..errors import ContractError, NumericalError
from ..gradkit import ParamStore, Tape, load_checkpoint, save_checkpoint
from ..optim import OptState, learning_rate, optimizer_step
from .process import forward_mask

log = logging.getLogger(__name__)


def init_mdm(rng, vocab_size, seq_len, hidden=64, ff=256, heads=2, n_blocks=2, absolute_positions=True):
    p = ParamStore()
    p["tok"] = layers.trunc_normal(rng, (vocab_size + 1, hidden))
    if absolute_positions:
        p["pos"] = layers.trunc_normal(rng, (seq_len, hidden))
    for i in range(n_blocks):
        layers.init_block(p, rng, f"block{i}", hidden, ff, heads, affine=True)
    p["lnf.g"] = np.ones(hidden)
    p["lnf.b"] = np.zeros(hidden)
    p["head.w"] = layers.trunc_normal(rng, (hidden, vocab_size))
    p["head.b"] = np.zeros(vocab_size)
    return p


def mdm_logits_graph(tape: Tape, seqs, heads, n_blocks):
    """Token logits (B, N, V) for full prompt+answer sequences with masks."""
    seqs = np.asarray(seqs, dtype=np.int64)
    N = seqs.shape[1]
    x = tape.gather(tape.param("tok"), seqs)
    if "pos" in tape.params:
        x = x + tape.gather(tape.param("pos"), np.arange(N))
    for i in range(n_blocks):
        x = layers.block(tape, x, f"block{i}", heads, np.arange(N))
    x = tape.layer_norm(x) * tape.param("lnf.g") + tape.param("lnf.b")
    return tape.linear(x, "head.w", "head.b")


def log_softmax(tape, z):
    shift = z.value.max(axis=-1, keepdims=True)
    zs = z + (-shift)
    return zs - tape.log(tape.sum(tape.exp(zs), axis=-1, keepdims=True))


def elbo_loss_graph(tape, batch, mask_id, heads, n_blocks):
    """Negative masked-token ELBO, averaged over the batch.

    ``batch`` holds ``prompt`` (B, d), ``x0`` and ``x_t`` (B, L) and ``t`` (B,).
    """
    x0 = np.asarray(batch["x0"], dtype=np.int64)
    xt = np.asarray(batch["x_t"], dtype=np.int64)
    t = np.asarray(batch["t"], dtype=np.float64).reshape(-1)
    B, L = x0.shape
    prompt = np.asarray(batch.get("prompt", np.zeros((B, 0))), dtype=np.int64).reshape(B, -1)
    masked = xt == mask_id
    if np.any((t <= 0) & masked.any(axis=1)):
        raise ContractError("t must be positive for batch elements with masked tokens")
    d = prompt.shape[1]
    z = mdm_logits_graph(tape, np.concatenate([prompt, xt], axis=1), heads, n_blocks)
    V = z.shape[-1]
    weight = np.zeros((B, d + L, V))
    bi, ki = np.nonzero(masked)
    weight[bi, d + ki, x0[bi, ki]] = 1.0 / (np.where(t > 0, t, 1.0)[bi] * B)
    return -tape.sum(log_softmax(tape, z) * weight)


def elbo_loss(params, batch, mask_id, heads=2, n_blocks=2) -> float:
    return float(elbo_loss_graph(Tape(params), batch, mask_id, heads, n_blocks).value)


class TinyMDM(BaseEstimator):
    """Bidirectional transformer denoiser fit to an environment's data.

    It takes no time input: the number of masks tells it how noisy the
    sequence is. ``predict_proba`` returns per-position token distributions
    with committed positions set one-hot.
    """

    def __init__(
        self,
        hidden=64,
        ff=256,
        heads=2,
        n_blocks=2,
        absolute_positions=True,
        steps=1500,
        batch_size=64,
        lr=3e-3,
        warmup=50,
        weight_decay=0.0,
        max_grad_norm=1.0,
        t_min=0.01,
        random_state=0,
    ):
        self.hidden = hidden
        self.ff = ff
        self.heads = heads
        self.n_blocks = n_blocks
        self.absolute_positions = absolute_positions
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.t_min = t_min
        self.random_state = random_state

    def fit(self, env, y=None):
        rng = np.random.default_rng(self.random_state)
        self.mask_id_ = env.mask_id
        self.prompt_len_ = env.d
        params = init_mdm(
            rng, env.V, env.d + env.L, self.hidden, self.ff, self.heads, self.n_blocks, self.absolute_positions
        )
        state = OptState.zeros(params)
        self.loss_curve_ = []
        for step in range(1, self.steps + 1):
            prompt, x0 = env.sample_tasks(self.batch_size, rng)
            t = rng.uniform(self.t_min, 1.0, size=self.batch_size)
            xt = np.stack([forward_mask(x0[i], t[i], rng, env.mask_id) for i in range(self.batch_size)])
            tape = Tape(params)
            loss = elbo_loss_graph(
                tape, {"prompt": prompt, "x0": x0, "x_t": xt, "t": t}, env.mask_id, self.heads, self.n_blocks
            )
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericalError(f"MDM training diverged at step {step}")
            grads = tape.backward(loss)
            lr = learning_rate(step, self.lr, self.warmup, self.steps)
            params, state, _ = optimizer_step(
                params, grads, state, lr=lr, weight_decay=self.weight_decay, max_grad_norm=self.max_grad_norm
            )
            self.loss_curve_.append(value)
        self.params_ = params
        return self

    def predict_proba(self, prompts, answers):
        check_is_fitted(self, "params_")
        answers = np.asarray(answers, dtype=np.int64)
        B, L = answers.shape
        prompts = np.asarray(prompts, dtype=np.int64).reshape(B, self.prompt_len_)
        z = mdm_logits_graph(Tape(self.params_), np.concatenate([prompts, answers], axis=1), self.heads, self.n_blocks)
        z = z.value[:, self.prompt_len_ :, :]
        p = np.exp(z - z.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        committed = answers != self.mask_id_
        bi, ki = np.nonzero(committed)
        p[bi, ki] = 0.0
        p[bi, ki, answers[bi, ki]] = 1.0
        return p

    def save(self, path):
        check_is_fitted(self, "params_")
        meta = {"mdm": self.get_params(), "mask_id": int(self.mask_id_), "prompt_len": int(self.prompt_len_)}
        save_checkpoint(path, self.params_, meta)

    @classmethod
    def load(cls, path):
        params, meta = load_checkpoint(path)
        if "mdm" not in meta:
            raise ContractError(f"{path} is not an MDM checkpoint")
        model = cls(**meta["mdm"])
        model.params_ = params
        model.mask_id_ = meta["mask_id"]
        model.prompt_len_ = meta["prompt_len"]
        return model


def train_mdm(env, mdm_config: dict | None = None, rng=None) -> ParamStore:
    cfg = dict(mdm_config or {})
    if rng is not None:
        cfg.setdefault("random_state", int(rng.integers(2**31)))
    return TinyMDM(**cfg).fit(env).params_
