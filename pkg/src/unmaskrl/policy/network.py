"""The confidence-based unmasking policy network."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import layers
from ..errors import ConfigError, NumericalError
from ..gradkit import ParamStore, Tape

HEAD_KINDS = ("bernoulli", "dpls")


@dataclass
class PolicyArch:
    n_blocks: int = 1
    hidden: int = 128
    ff: int = 512
    heads: int = 2
    time_embed_dim: int = 128
    top_n_conf: int = 1
    head_kind: str = "bernoulli"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if (self.hidden // self.heads) % 2:
            raise ConfigError("per-head width must be even for rotary embeddings")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.top_n_conf < 1 or self.n_blocks < 1:
            raise ConfigError("top_n_conf and n_blocks must be >= 1")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")

    @property
    def n_features(self):
        return self.top_n_conf + 1

    def to_dict(self):
        return asdict(self)


_MODS = ("scale1", "shift1", "scale2", "shift2")


def init_policy(arch: PolicyArch, rng) -> ParamStore:
    """Random weights (truncated normal, std 0.02) with a zero output head."""
    H = arch.hidden
    p = ParamStore()
    p["in.w"] = layers.trunc_normal(rng, (arch.n_features, H))
    p["in.b"] = np.zeros(H)
    p["time.w1"] = layers.trunc_normal(rng, (arch.time_embed_dim, H))
    p["time.b1"] = np.zeros(H)
    for i in range(arch.n_blocks):
        for m in _MODS:
            p[f"time.{i}.{m}.w"] = layers.trunc_normal(rng, (H, H))
            p[f"time.{i}.{m}.b"] = np.zeros(H)
        layers.init_block(p, rng, f"block{i}", H, arch.ff, arch.heads, affine=False)
    p["out.w"] = np.zeros((1, H))
    p["out.b"] = np.zeros(1)
    return p


def featurize(answers, dists, mask_id, top_n=1) -> np.ndarray:
    """Per-position features (B, L, top_n + 1): sorted top confidences, then the mask bit.

    Committed positions carry one-hot rows and so contribute ``(1, 0, ...)``;
    rows with fewer than ``top_n`` entries are zero-padded.
    """
    answers = np.asarray(answers)
    dists = np.asarray(dists, dtype=np.float64)
    top = -np.sort(-dists, axis=-1)[..., :top_n]
    if top.shape[-1] < top_n:
        pad = np.zeros(top.shape[:-1] + (top_n - top.shape[-1],))
        top = np.concatenate([top, pad], axis=-1)
    masked = (answers == mask_id).astype(np.float64)[..., None]
    return np.concatenate([top, masked], axis=-1)


def logits_graph(tape: Tape, features, t_frac, arch: PolicyArch):
    """Policy logits as a tape node of shape (B, 1, L)."""
    features = np.asarray(features, dtype=np.float64)
    B, L, F = features.shape
    if F != arch.n_features:
        raise ConfigError(f"expected {arch.n_features} features per position, got {F}")
    positions = np.arange(L)
    x = tape.linear(tape.input(features, "features"), "in.w", "in.b")
    emb = tape.input(layers.sinusoidal_embedding(np.broadcast_to(t_frac, (B,)), arch.time_embed_dim), "t_embed")
    u = tape.silu(tape.linear(emb, "time.w1", "time.b1"))
    for i in range(arch.n_blocks):
        mod = {m: tape.linear(u, f"time.{i}.{m}.w", f"time.{i}.{m}.b") for m in _MODS}
        mods = ((mod["scale1"], mod["shift1"]), (mod["scale2"], mod["shift2"]))
        x = layers.block(tape, x, f"block{i}", arch.heads, positions, mods)
    h = tape.layer_norm(x)
    return tape.matmul(tape.param("out.w"), h, transpose_b=True) + tape.param("out.b")


def policy_forward(params: ParamStore, features, t_frac, arch: PolicyArch) -> np.ndarray:
    """Logits ``b`` of shape (B, L) (or (L,) for unbatched features)."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 2
    if single:
        features = features[None]
    out = logits_graph(Tape(params), features, t_frac, arch).value[:, 0, :]
    if not np.all(np.isfinite(out)):
        raise NumericalError("policy produced non-finite logits")
    return out[0] if single else out
