"""Finite-difference verification of tape gradients."""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from .params import ParamStore
from .tape import Tape


def _scalar(params, loss_fn, name):
    tape = Tape(params)
    value = float(np.asarray(loss_fn(tape).value).reshape(()))
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss while perturbing parameter {name!r}")
    return value


def finite_difference_check(
    params: ParamStore,
    loss_fn,
    step: float = 1e-5,
    n_directions: int = 3,
    seed: int = 0,
    per_param: bool = False,
):
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn(tape)`` builds the loss on the given tape and returns the scalar
    node. For every parameter array, ``n_directions`` random unit directions
    are probed; directional derivatives avoid the noise floor that swamps
    individual near-zero gradient coordinates.

    Returns the maximum relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``; with
    ``per_param=True`` also returns the per-parameter maxima.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tape = Tape(params)
    loss = loss_fn(tape)
    base = float(np.asarray(loss.value).reshape(()))
    if not np.isfinite(base):
        raise NumericalError("non-finite loss at the unperturbed parameters")
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, value in params.items():
        worst = 0.0
        for _ in range(n_directions):
            d = rng.standard_normal(value.shape)
            d /= np.linalg.norm(d) or 1.0
            plus, minus = params.copy(), params.copy()
            plus[name] = value + step * d
            minus[name] = value - step * d
            numeric = (_scalar(plus, loss_fn, name) - _scalar(minus, loss_fn, name)) / (2 * step)
            analytic = float(np.sum(grads[name] * d))
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    top = max(errors.values(), default=0.0)
    return (top, errors) if per_param else top


def _primitive_cases(rng, n=8):
    """One randomized loss per primitive; each maps a tape to a scalar node."""
    shape = (int(rng.integers(2, n + 1)), int(rng.integers(2, n + 1)))
    k = int(rng.integers(2, n + 1))
    even = 2 * int(rng.integers(1, n // 2 + 1))
    weights = {}

    def weighted(tape, node):
        w = weights.setdefault(node.shape, rng.standard_normal(node.shape))
        return tape.sum(node * w)

    params = ParamStore()
    params["a"] = rng.standard_normal(shape)
    params["b"] = rng.standard_normal((shape[1], k))
    params["c"] = rng.standard_normal(shape)
    params["row"] = rng.standard_normal((1, shape[1]))
    params["pos"] = rng.uniform(0.1, 2.0, shape)
    params["r"] = rng.standard_normal((shape[0], even))
    params["table"] = rng.standard_normal((5, k))
    params["a3"] = rng.standard_normal((2,) + shape)
    params["c3"] = rng.standard_normal((2,) + shape)
    idx = rng.integers(0, 5, size=7)
    positions = np.arange(shape[0])

    cases = {
        "matmul": lambda t: weighted(t, t.matmul(t.param("a"), t.param("b"))),
        "matmul_batched": lambda t: weighted(t, t.matmul(t.param("a3"), t.param("b"))),
        "matmul_transposed": lambda t: weighted(t, t.matmul(t.param("a3"), t.param("c3"), transpose_b=True)),
        "add": lambda t: weighted(t, t.add(t.param("a"), t.param("row"))),
        "mul": lambda t: weighted(t, t.mul(t.param("a"), t.param("c"))),
        "sigmoid": lambda t: weighted(t, t.sigmoid(t.param("a"))),
        "exp": lambda t: weighted(t, t.exp(t.param("a"))),
        "log": lambda t: weighted(t, t.log(t.param("pos"))),
        "softmax": lambda t: weighted(t, t.softmax(t.param("a"))),
        "layer_norm": lambda t: weighted(t, t.layer_norm(t.param("a"))),
        "rope": lambda t: weighted(t, t.rope(t.param("r"), positions)),
        "gather": lambda t: weighted(t, t.gather(t.param("table"), idx)),
        "sum": lambda t: weighted(t, t.sum(t.param("a"), axis=0)),
        "mean": lambda t: weighted(t, t.mean(t.param("a"), axis=1, keepdims=True)),
    }
    return params, cases


def check_primitives(seed: int = 0, step: float = 1e-5) -> dict:
    """Max relative finite-difference error per primitive on random shapes up to 8x8."""
    rng = np.random.default_rng(seed)
    params, cases = _primitive_cases(rng)
    return {name: finite_difference_check(params, fn, step=step, seed=seed) for name, fn in cases.items()}
