"""Reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records primitive applications in execution order, which is
automatically a topological order. Composite layers are built in Python from
the primitives registered in :data:`PRIMITIVES`; each primitive owns exactly
one forward rule and one vector-Jacobian rule so that the rules can be
checked (and, in tests, sabotaged) individually.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, ContractError, NumericalError
from .params import ParamStore

LOG_FLOOR = 1e-300
LN_EPS = 1e-5


@dataclass
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]
    check: Callable[..., None] | None = None


PRIMITIVES: dict[str, Primitive] = {}


def register(name, forward, vjp, check=None):
    PRIMITIVES[name] = Primitive(name, forward, vjp, check)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- primitive rules -------------------------------------------------------
# forward(*input_values, **attrs) -> out
# vjp(g, out, input_values, **attrs) -> tuple of input adjoints


def _check_broadcast(a, b, **_):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _matmul_check(a, b, transpose_b=False):
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    inner = b.shape[-1] if transpose_b else b.shape[-2]
    if a.shape[-1] != inner:
        raise ConfigError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
            + (" (b transposed)" if transpose_b else "")
        )


def _matmul_fwd(a, b, transpose_b=False):
    bt = np.swapaxes(b, -1, -2) if transpose_b else b
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ bt).reshape(a.shape[:-1] + (bt.shape[-1],))
    return a @ bt


def _matmul_vjp(g, out, inputs, transpose_b=False):
    a, b = inputs
    bt = np.swapaxes(b, -1, -2) if transpose_b else b
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        da = (g2 @ bt.T).reshape(a.shape)
        dbt = a.reshape(-1, a.shape[-1]).T @ g2
        return da, (dbt.T if transpose_b else dbt)
    da = _unbroadcast(g @ np.swapaxes(bt, -1, -2), a.shape)
    dbt = np.swapaxes(a, -1, -2) @ g
    db = np.swapaxes(dbt, -1, -2) if transpose_b else dbt
    return da, _unbroadcast(db, b.shape)


def _add_vjp(g, out, inputs):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_vjp(g, out, inputs):
    a, b = inputs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _sigmoid_vjp(g, out, inputs):
    return (g * out * (1.0 - out),)


def _exp_vjp(g, out, inputs):
    return (g * out,)


def _log_check(x):
    if np.any(~(x >= LOG_FLOOR)):
        bad = x[~(x >= LOG_FLOOR)].ravel()[0]
        raise NumericalError(f"log of non-positive or underflowed value {bad!r}")


def _log_fwd(x):
    return np.log(np.maximum(x, LOG_FLOOR))


def _log_vjp(g, out, inputs):
    (x,) = inputs
    return (g / np.maximum(x, LOG_FLOOR),)


def _softmax_fwd(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _softmax_vjp(g, out, inputs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _layer_norm_fwd(x, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


def _layer_norm_vjp(g, out, inputs, eps=LN_EPS):
    (x,) = inputs
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * out).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - out * gy),)


def rope_angles(positions, dim, base=10000.0):
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def _rope_check(x, positions=None, base=10000.0):
    if x.shape[-1] % 2:
        raise ConfigError(f"rotary embedding needs an even last dimension, got {x.shape}")
    if len(positions) != x.shape[-2]:
        raise ConfigError(f"rotary positions ({len(positions)}) != sequence axis {x.shape[-2]}")


def _rope_fwd(x, positions=None, base=10000.0):
    cos, sin = rope_angles(positions, x.shape[-1], base)
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_vjp(g, out, inputs, positions=None, base=10000.0):
    cos, sin = rope_angles(positions, g.shape[-1], base)
    h = g.shape[-1] // 2
    g1, g2 = g[..., :h], g[..., h:]
    return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)


def _gather_check(table, indices=None):
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ConfigError(f"gather index out of range for table of {table.shape[0]} rows")


def _gather_fwd(table, indices=None):
    return table[indices]


def _gather_vjp(g, out, inputs, indices=None):
    (table,) = inputs
    dt = np.zeros_like(table)
    np.add.at(dt, indices, g)
    return (dt,)


def _reduce_vjp(g, x, axis, keepdims, scale):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g * scale, x.shape).copy()


def _sum_fwd(x, axis=None, keepdims=False):
    return np.asarray(x.sum(axis=axis, keepdims=keepdims))


def _sum_vjp(g, out, inputs, axis=None, keepdims=False):
    (x,) = inputs
    return (_reduce_vjp(g, x, axis, keepdims, 1.0),)


def _count(x, axis):
    if axis is None:
        return x.size
    axes = (axis,) if np.isscalar(axis) else axis
    return int(np.prod([x.shape[a] for a in axes]))


def _mean_fwd(x, axis=None, keepdims=False):
    return np.asarray(x.mean(axis=axis, keepdims=keepdims))


def _mean_vjp(g, out, inputs, axis=None, keepdims=False):
    (x,) = inputs
    return (_reduce_vjp(g, x, axis, keepdims, 1.0 / _count(x, axis)),)


register("matmul", _matmul_fwd, _matmul_vjp, _matmul_check)
register("add", lambda a, b: a + b, _add_vjp, _check_broadcast)
register("mul", lambda a, b: a * b, _mul_vjp, _check_broadcast)
register("sigmoid", expit, _sigmoid_vjp)
register("exp", np.exp, _exp_vjp)
register("log", _log_fwd, _log_vjp, _log_check)
register("softmax", _softmax_fwd, _softmax_vjp)
register("layer_norm", _layer_norm_fwd, _layer_norm_vjp)
register("rope", _rope_fwd, _rope_vjp, _rope_check)
register("gather", _gather_fwd, _gather_vjp, _gather_check)
register("sum", _sum_fwd, _sum_vjp)
register("mean", _mean_fwd, _mean_vjp)


# --- tape ------------------------------------------------------------------


class Node:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return self.tape.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.mul(self, self.tape.const(-1.0))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))

    def __repr__(self):
        op = self.tape.ops[self.index][0]
        return f"Node#{self.index}<{op} {self.shape}>"


@dataclass
class Tape:
    """Single-use record of one forward evaluation.

    ``ops[i]`` is ``(op_name, input_indices, attrs, label)``; leaves use the
    op names ``"param"``, ``"input"`` and ``"const"``.
    """

    params: ParamStore | None = None
    ops: list = field(default_factory=list)
    values: list = field(default_factory=list)
    param_nodes: dict = field(default_factory=dict)
    _adjoints: list | None = None

    # leaves
    def _leaf(self, kind, value, label=None):
        self.ops.append((kind, (), {}, label))
        self.values.append(np.asarray(value, dtype=np.float64))
        return Node(self, len(self.values) - 1)

    def param(self, name) -> Node:
        if name not in self.param_nodes:
            if self.params is None or name not in self.params:
                raise ConfigError(f"unknown parameter {name!r}")
            self.param_nodes[name] = self._leaf("param", self.params[name], name).index
        return Node(self, self.param_nodes[name])

    def input(self, value, name=None) -> Node:
        return self._leaf("input", value, name)

    def const(self, value) -> Node:
        return self._leaf("const", value)

    # primitives
    def apply(self, op, *inputs, label=None, **attrs) -> Node:
        prim = PRIMITIVES[op]
        vals = [n.value for n in inputs]
        if prim.check is not None:
            try:
                prim.check(*vals, **attrs)
            except (ConfigError, NumericalError) as exc:
                where = label or f"{op}#{len(self.values)}"
                raise type(exc)(f"node {where}: {exc}") from None
        out = np.asarray(prim.forward(*vals, **attrs), dtype=np.float64)
        self.ops.append((op, tuple(n.index for n in inputs), attrs, label))
        self.values.append(out)
        return Node(self, len(self.values) - 1)

    def matmul(self, a, b, transpose_b=False, label=None):
        return self.apply("matmul", a, b, transpose_b=transpose_b, label=label)

    def add(self, a, b, label=None):
        return self.apply("add", a, b, label=label)

    def mul(self, a, b, label=None):
        return self.apply("mul", a, b, label=label)

    def sigmoid(self, x, label=None):
        return self.apply("sigmoid", x, label=label)

    def exp(self, x, label=None):
        return self.apply("exp", x, label=label)

    def log(self, x, label=None):
        return self.apply("log", x, label=label)

    def softmax(self, x, label=None):
        return self.apply("softmax", x, label=label)

    def layer_norm(self, x, label=None):
        return self.apply("layer_norm", x, label=label)

    def rope(self, x, positions, label=None):
        return self.apply("rope", x, positions=np.asarray(positions), label=label)

    def gather(self, table, indices, label=None):
        return self.apply("gather", table, indices=np.asarray(indices, dtype=np.int64), label=label)

    def sum(self, x, axis=None, keepdims=False, label=None):
        return self.apply("sum", x, axis=axis, keepdims=keepdims, label=label)

    def mean(self, x, axis=None, keepdims=False, label=None):
        return self.apply("mean", x, axis=axis, keepdims=keepdims, label=label)

    # composites used in several places
    def silu(self, x):
        return x * self.sigmoid(x)

    def linear(self, x, weight, bias=None):
        y = self.matmul(x, self.param(weight))
        return y + self.param(bias) if bias else y

    # reverse pass
    def backward(self, loss: Node, seed: float = 1.0) -> ParamStore:
        """Propagate adjoints from a scalar ``loss``.

        Returns gradients for every entry of ``self.params``; parameters the
        loss does not reach get zeros.
        """
        if loss.tape is not self:
            raise ContractError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        adj: list[Any] = [None] * len(self.values)
        adj[loss.index] = np.full(loss.shape, float(seed))
        for i in range(loss.index, -1, -1):
            g = adj[i]
            op, ins, attrs, _ = self.ops[i]
            if g is None or not ins:
                continue
            grads = PRIMITIVES[op].vjp(g, self.values[i], [self.values[j] for j in ins], **attrs)
            for j, gj in zip(ins, grads):
                if gj is None:
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj
        self._adjoints = adj
        out = ParamStore()
        if self.params is not None:
            for name, value in self.params.items():
                idx = self.param_nodes.get(name)
                g = adj[idx] if idx is not None else None
                out[name] = np.zeros_like(value) if g is None else np.asarray(g, dtype=np.float64).reshape(value.shape)
        return out

    @property
    def adjoints(self) -> list[np.ndarray]:
        if self._adjoints is None:
            raise ContractError("backward has not been run on this tape")
        return [np.zeros_like(v) if a is None else a for a, v in zip(self._adjoints, self.values)]

    def adjoint(self, node: Node) -> np.ndarray:
        return self.adjoints[node.index]


def eval_graph(params: ParamStore, graph: Callable, inputs: dict | None = None):
    """Run ``graph(tape, input_nodes)`` on a fresh tape.

    ``graph`` may return a node or a (possibly nested) dict/tuple of nodes;
    the first return value mirrors that structure with plain arrays.
    """
    tape = Tape(params)
    nodes = {k: tape.input(v, name=k) for k, v in (inputs or {}).items()}
    result = graph(tape, nodes)
    return _values_of(result), tape


def _values_of(obj):
    if isinstance(obj, Node):
        return obj.value
    if isinstance(obj, dict):
        return {k: _values_of(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_values_of(v) for v in obj)
    return obj


def backward(tape: Tape, loss: Node, seed: float = 1.0) -> ParamStore:
    return tape.backward(loss, seed)
