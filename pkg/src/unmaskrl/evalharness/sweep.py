"""Accuracy-versus-NFE sweeps over heuristics and learned policies."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields

import numpy as np
from sklearn.base import clone
from sklearn.model_selection import ParameterGrid

from ..diffenv import RolloutSettings, run_rollouts
from ..errors import ConfigError
from ..gradkit import load_checkpoint
from ..grpo import trajectory_reward
from ..heuristics import RandomKSampler, ThresholdSampler, TopKSampler
from ..policy import PolicyArch, PolicySampler, init_policy
from ..seeding import stream

CSV_HEADER = "method,param,seed,accuracy,mean_nfe,n_samples"


@dataclass(frozen=True)
class ParetoRow:
    method: str
    param: str
    seed: int
    accuracy: float
    mean_nfe: float
    n_samples: int


@dataclass
class Method:
    """One sweep cell's sampler plus the labels it is reported under."""

    name: str
    param: str
    sampler: object


def heuristic_methods(k_grid=(), top_k_grid=(), lambda_grid=()):
    """Instantiate heuristic samplers for each grid value."""
    out = []
    for name, base, grid, key in (
        ("random_k", RandomKSampler(), k_grid, "k"),
        ("top_k", TopKSampler(), top_k_grid, "k"),
        ("threshold", ThresholdSampler(), lambda_grid, "lam"),
    ):
        if not len(grid):
            continue
        for params in ParameterGrid({key: list(grid)}):
            out.append(Method(name, _label(params[key]), clone(base).set_params(**params)))
    return out


def load_policy(path, arch: PolicyArch | None = None):
    """Load a policy checkpoint; the architecture comes from its manifest unless given."""
    params, meta = load_checkpoint(path)
    arch = arch or PolicyArch(**meta.get("arch", {}))
    expected = init_policy(arch, np.random.default_rng(0)).shapes
    got = params.shapes
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
    if missing or extra or wrong:
        raise ConfigError(f"checkpoint {path} does not match the policy architecture: "
                          f"missing={missing} unexpected={extra} shape_mismatch={wrong}")
    return params, arch, meta


def policy_methods(checkpoints, tau_pis, mask_id):
    out = []
    for path in checkpoints:
        params, arch, meta = load_policy(path)
        for tau in tau_pis:
            label = f"alpha={_label(meta.get('alpha', 'na'))};tau_pi={_label(tau)}"
            out.append(Method("policy", label, PolicySampler(params, arch, mask_id, tau)))
    return out


def _label(x) -> str:
    if isinstance(x, float) and x.is_integer():
        return str(int(x))
    return str(x)


def _sort_key(row: ParetoRow):
    try:
        num = float(row.param)
    except ValueError:
        num = float("nan")
    return (row.method, 0 if num == num else 1, num if num == num else 0.0, row.param, row.seed)


def run_method(env, denoiser, method: Method, n_eval, seed, block_len=None):
    """Greedy rollouts (tau=0, fallback on) of one method on ``n_eval`` tasks drawn for ``seed``."""
    prompts, refs = env.sample_tasks(n_eval, stream(seed, "eval_tasks"))
    rngs = [stream(seed, "eval", method.name, method.param, i) for i in range(n_eval)]
    settings = RolloutSettings(block_len=block_len, tau=0.0, fallback_on=True)
    return run_rollouts(env, denoiser, method.sampler, prompts, settings, rngs, list(refs))


def summarize(method: Method, seed, trajs) -> ParetoRow:
    n = len(trajs)
    correct = sum(int(t.correct) for t in trajs)
    return ParetoRow(method.name, method.param, int(seed), correct / n, float(np.mean([t.nfe for t in trajs])), n)


def mean_reward(trajs, alpha, shape="multiplicative") -> float:
    return float(np.mean([trajectory_reward(t, alpha, shape) for t in trajs]))


def pareto_sweep(env, denoiser, methods, n_eval, seeds, block_len=None):
    """Evaluate every (method, seed) cell; rows come back sorted by (method, param, seed)."""
    if not methods:
        raise ConfigError("pareto_sweep needs at least one method")
    rows = [
        summarize(m, s, run_method(env, denoiser, m, n_eval, s, block_len)) for m in methods for s in seeds
    ]
    return sorted(rows, key=_sort_key)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(ParetoRow)])
    for r in rows:
        vals = list(astuple(r))
        vals[3] = repr(float(vals[3]))
        vals[4] = repr(float(vals[4]))
        w.writerow(vals)
    return buf.getvalue()


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows))


def read_csv(path):
    with open(path, newline="") as fh:
        return [
            ParetoRow(r["method"], r["param"], int(r["seed"]), float(r["accuracy"]), float(r["mean_nfe"]),
                      int(r["n_samples"]))
            for r in csv.DictReader(fh)
        ]
