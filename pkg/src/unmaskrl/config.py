"""Run configuration: line-oriented ``section.key = value`` text.

Files may also use INI-style ``[section]`` headers followed by bare
``key = value`` lines. Unknown sections or keys are errors, and every
loaded configuration can be written back out as a fully resolved file.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field

import numpy as np

from .diffenv import MarkovChainSpec, build_env
from .errors import ConfigError
from .grpo import TrainConfig
from .policy import PolicyArch
from .seeding import stream

ENV_KINDS = ("two_mode", "identity", "cyclic", "noisy_cycle", "random", "file")


@dataclass
class EnvConfig:
    kind: str = "two_mode"
    vocab_size: int = 2
    prompt_len: int = 0
    answer_len: int = 16
    reward_mode: str = "validity"
    block_len: int = 0  # 0: no semi-autoregressive blocks
    cycle_prob: float = 0.9
    sparsity: float = 0.0
    concentration: float = 1.0
    spec_file: str = ""
    denoiser: str = "exact"
    mdm_checkpoint: str = ""

    def validate(self):
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"env.kind={self.kind!r} must be one of {ENV_KINDS}")
        if self.kind == "two_mode" and self.vocab_size != 2:
            raise ConfigError("env.vocab_size must be 2 for the two_mode chain")
        if self.kind == "file" and not self.spec_file:
            raise ConfigError("env.spec_file is required when env.kind = file")
        if self.vocab_size < 2 or self.answer_len < 1 or self.prompt_len < 0:
            raise ConfigError("env.vocab_size >= 2, env.answer_len >= 1 and env.prompt_len >= 0 are required")
        if self.block_len < 0 or (self.block_len and self.answer_len % self.block_len):
            raise ConfigError(f"env.block_len={self.block_len} must be 0 or divide env.answer_len={self.answer_len}")
        if self.reward_mode not in ("validity", "exact_match"):
            raise ConfigError("env.reward_mode must be validity or exact_match")
        if self.denoiser not in ("exact", "mdm"):
            raise ConfigError("env.denoiser must be exact or mdm")
        if self.kind == "noisy_cycle" and (self.vocab_size < 3 or not 0 < self.cycle_prob <= 1):
            raise ConfigError("env.noisy_cycle needs env.vocab_size >= 3 and env.cycle_prob in (0, 1]")
        if not 0 <= self.sparsity < 1:
            raise ConfigError("env.sparsity must lie in [0, 1)")


@dataclass
class EvalConfig:
    n_eval: int = 256
    seeds: tuple = (0, 1, 2)
    methods: tuple = ("random_k", "top_k", "threshold")
    random_k_grid: tuple = ()  # empty: paper grid rescaled to the answer length
    top_k_grid: tuple = ()
    threshold_grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    checkpoints: tuple = ()
    tau_pi: tuple = (1.0,)
    alpha: float = 1.0
    prompt: tuple = ()  # oracle prompt; empty: sampled from the seed
    workers: int = 1

    def validate(self):
        if self.n_eval < 1:
            raise ConfigError("eval.n_eval must be >= 1")
        if not self.seeds:
            raise ConfigError("eval.seeds must be non-empty")
        bad = set(self.methods) - {"random_k", "top_k", "threshold", "policy"}
        if bad:
            raise ConfigError(f"eval.methods has unknown entries {sorted(bad)}")
        if any(not 0 < x <= 1 for x in self.threshold_grid):
            raise ConfigError("eval.threshold.grid values must lie in (0, 1]")
        if any(k < 1 for k in (*self.random_k_grid, *self.top_k_grid)):
            raise ConfigError("eval K grids must hold integers >= 1")
        if any(t <= 0 for t in self.tau_pi):
            raise ConfigError("eval.tau_pi values must be > 0")
        if self.alpha < 0:
            raise ConfigError("eval.alpha must be >= 0")
        if self.workers != 1:
            raise ConfigError("eval.workers: only 1 is supported")


@dataclass
class MdmConfig:
    hidden: int = 64
    ff: int = 256
    heads: int = 2
    n_blocks: int = 2
    absolute_positions: bool = True
    steps: int = 1500
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 50
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    t_min: float = 0.01

    def validate(self):
        if self.hidden % self.heads or (self.hidden // self.heads) % 2:
            raise ConfigError("mdm.hidden must split into heads of even width")
        if min(self.steps, self.batch_size, self.n_blocks) < 1 or self.lr <= 0:
            raise ConfigError("mdm.steps, mdm.batch_size, mdm.n_blocks must be >= 1 and mdm.lr > 0")
        if not 0 < self.t_min <= 1:
            raise ConfigError("mdm.t_min must lie in (0, 1]")


@dataclass
class RunSection:
    seed: int = 0

    def validate(self):
        if self.seed < 0:
            raise ConfigError("run.seed must be >= 0")


SECTIONS = {
    "run": RunSection,
    "env": EnvConfig,
    "policy": PolicyArch,
    "train": TrainConfig,
    "eval": EvalConfig,
    "mdm": MdmConfig,
}
_SKIP = {("train", "block_len")}  # taken from env.block_len


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyArch = field(default_factory=PolicyArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mdm: MdmConfig = field(default_factory=MdmConfig)

    @property
    def seed(self):
        return self.run.seed

    @property
    def alpha(self):
        return self.train.alpha

    def build_env(self):
        spec, mode = env_spec(self.env, self.seed)
        return build_env(spec, mode or self.env.reward_mode)

    def to_text(self) -> str:
        lines = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                if (sec, f.name) in _SKIP:
                    continue
                lines.append(f"{sec}.{_external(f.name)} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _external(name):
    return name[: -len("_grid")] + ".grid" if name.endswith("_grid") else name


def _internal(key):
    return key.replace(".grid", "_grid")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, hint, key):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)][0]
        if raw.lower() in ("auto", "none", ""):
            return None
        return _coerce(raw, inner, key)
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        if hint is int:
            f = float(raw)
            if not f.is_integer():
                raise ValueError(raw)
            return int(f)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if hint is tuple:
            parts = [p for p in raw.replace(" ", ",").split(",") if p]
            return tuple(_scalar(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported type {hint}")


def _scalar(p):
    for cast in (int, float):
        try:
            return cast(p)
        except ValueError:
            pass
    return p


def parse_lines(text: str, source="<config>") -> list[tuple[str, str]]:
    """``(section.key, value)`` pairs from config text."""
    out, section = [], None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section and key.split(".")[0] not in SECTIONS:
            key = f"{section}.{key}"
        out.append((key, value))
    return out


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    """Parse, apply ``key=value`` overrides, and validate.

    ``seed`` (when given) replaces ``run.seed``.
    """
    pairs = []
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        with open(path) as fh:
            pairs += parse_lines(fh.read(), path)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        k, v = ov.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    values = {sec: {} for sec in SECTIONS}
    for key, raw in pairs:
        sec, _, name = key.partition(".")
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section in key {key!r}")
        cls = SECTIONS[sec]
        hints = typing.get_type_hints(cls)
        name = _internal(name)
        if name not in hints or (sec, name) in _SKIP:
            raise ConfigError(f"unknown config key {key!r}")
        values[sec][name] = _coerce(raw, hints[name], key)
    if seed is not None:
        values["run"]["seed"] = int(seed)
    values["train"]["block_len"] = values["env"].get("block_len", EnvConfig.block_len) or None
    built = {}
    for sec, cls in SECTIONS.items():
        try:
            obj = cls(**values[sec])
        except ConfigError as exc:
            msg = str(exc)
            raise ConfigError(msg if msg.startswith(f"{sec}.") else f"{sec}: {msg}") from None
        if hasattr(obj, "validate"):
            obj.validate()
        built[sec] = obj
    return RunConfig(**built)


def write_resolved(cfg: RunConfig, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config")
    with open(path, "w") as fh:
        fh.write(cfg.to_text())
    return path


# --- environment specs -------------------------------------------------------------


def env_spec(ec: EnvConfig, seed: int):
    """``(MarkovChainSpec, reward_mode or None)`` for an env section."""
    if ec.kind == "two_mode":
        return MarkovChainSpec.two_mode(ec.prompt_len, ec.answer_len), None
    if ec.kind == "identity":
        return MarkovChainSpec.identity(ec.vocab_size, ec.prompt_len, ec.answer_len), None
    if ec.kind == "cyclic":
        return MarkovChainSpec.cyclic(ec.vocab_size, ec.prompt_len, ec.answer_len), None
    if ec.kind == "noisy_cycle":
        return MarkovChainSpec.noisy_cycle(ec.vocab_size, ec.cycle_prob, ec.prompt_len, ec.answer_len), None
    if ec.kind == "random":
        rng = stream(seed, "env_spec")
        return MarkovChainSpec.random(
            rng, ec.vocab_size, ec.prompt_len, ec.answer_len, ec.sparsity, ec.concentration
        ), None
    return load_env_spec_file(ec.spec_file)


def load_env_spec_file(path):
    """Read a chain from ``key = value`` lines; arrays are comma or space separated, row-major.

    Returns ``(spec, reward_mode)``; ``reward_mode`` is ``None`` when the file omits it.
    """
    with open(path) as fh:
        pairs = parse_lines(fh.read(), path)
    vals = dict(pairs)
    need = ("vocab_size", "initial_dist", "transition", "prompt_len", "answer_len")
    missing = [k for k in need if k not in vals]
    extra = sorted(set(vals) - set(need) - {"reward_mode"})
    if missing or extra:
        raise ConfigError(f"{path}: missing keys {missing}, unknown keys {extra}")
    V = int(vals["vocab_size"])
    nums = lambda s: np.array([float(x) for x in s.replace(",", " ").split()])  # noqa: E731
    trans = nums(vals["transition"])
    if trans.size != V * V:
        raise ConfigError(f"{path}: transition needs {V * V} entries, got {trans.size}")
    spec = MarkovChainSpec(
        V, nums(vals["initial_dist"]), trans.reshape(V, V), int(vals["prompt_len"]), int(vals["answer_len"])
    )
    return spec, vals.get("reward_mode")
