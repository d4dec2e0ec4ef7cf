import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unmaskrl.errors import ConfigError, ContractError, NumericalError
from unmaskrl.gradkit import (
    PRIMITIVES,
    ParamStore,
    Tape,
    dump_checkpoint,
    eval_graph,
    finite_difference_check,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from unmaskrl.gradkit.check import check_primitives


def _store(**arrays):
    p = ParamStore()
    for k, v in arrays.items():
        p[k] = np.asarray(v, dtype=np.float64)
    return p


def test_identity_matmul_passes_input_through(rng):
    x = rng.standard_normal((3, 4))
    tape = Tape(_store(A=np.eye(4)))
    out = tape.matmul(tape.input(x), tape.param("A"))
    np.testing.assert_array_equal(out.value, x)


def test_sigmoid_at_zero():
    tape = Tape(_store())
    assert tape.sigmoid(tape.input(np.zeros(1))).value[0] == 0.5


def test_softmax_of_equal_logits_is_uniform():
    tape = Tape(_store())
    np.testing.assert_allclose(tape.softmax(tape.input(np.zeros(3))).value, np.full(3, 1 / 3), rtol=0, atol=1e-15)


def test_linear_gradient():
    tape = Tape(_store(w=[3.0]))
    loss = tape.sum(tape.param("w") * 2.0)
    assert tape.backward(loss)["w"][0] == pytest.approx(2.0)


def test_sigmoid_gradient_at_zero():
    tape = Tape(_store(w=[0.0]))
    loss = tape.sum(tape.sigmoid(tape.param("w")))
    assert tape.backward(loss)["w"][0] == pytest.approx(0.25)


def test_non_scalar_loss_is_rejected():
    tape = Tape(_store(w=[1.0, 2.0]))
    with pytest.raises(ContractError):
        tape.backward(tape.param("w"))


def test_shape_mismatch_names_node():
    tape = Tape(_store(a=np.ones((2, 3)), b=np.ones((2, 3))))
    with pytest.raises(ConfigError, match="matmul"):
        tape.matmul(tape.param("a"), tape.param("b"), label="proj")


def test_log_of_zero_is_numerical_error():
    tape = Tape(_store())
    with pytest.raises(NumericalError):
        tape.log(tape.input(np.array([0.0, 1.0])))


def test_quadratic_gradient_check_is_tight(rng):
    p = _store(w=rng.standard_normal((4, 3)))
    err = finite_difference_check(p, lambda t: t.sum(t.param("w") * t.param("w")))
    assert err < 1e-8


def test_non_finite_loss_is_reported():
    p = _store(w=[1.0])
    with pytest.raises(NumericalError):
        finite_difference_check(p, lambda t: t.sum(t.param("w") * np.inf))


@pytest.mark.parametrize("name", sorted(check_primitives(0)))
def test_every_primitive_matches_finite_differences(name):
    assert check_primitives(3)[name] < 1e-6


def test_forward_is_pure(rng):
    p = _store(w=rng.standard_normal((4, 4)))
    x = rng.standard_normal((2, 4))

    def graph(t, nodes):
        return t.softmax(t.matmul(nodes["x"], t.param("w")))

    a, _ = eval_graph(p, graph, {"x": x})
    b, _ = eval_graph(p, graph, {"x": x})
    assert a.tobytes() == b.tobytes()


def test_corrupted_softmax_backward_is_caught(monkeypatch):
    good = PRIMITIVES["softmax"]

    def bad_vjp(g, out, inputs):
        (dx,) = good.vjp(g, out, inputs)
        return (1.1 * dx,)

    monkeypatch.setitem(PRIMITIVES, "softmax", dataclasses.replace(good, vjp=bad_vjp))
    errs = check_primitives(0)
    assert errs["softmax"] > 1e-3
    assert errs["matmul"] < 1e-6


def test_checkpoint_roundtrip(tmp_path, rng):
    p = _store(a=rng.standard_normal((3, 2)), b=rng.standard_normal(5))
    path = tmp_path / "x.uprl"
    save_checkpoint(path, p, {"alpha": 1.0})
    q, meta = load_checkpoint(path)
    assert meta["alpha"] == 1.0
    for k in p:
        np.testing.assert_array_equal(q[k], p[k].astype(np.float32))
    assert dump_checkpoint(q, meta) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_checkpoint(b"NOPE" + bytes(10))
    raw = dump_checkpoint(_store(a=np.ones(4)))
    with pytest.raises(ConfigError):
        parse_checkpoint(raw[:-3])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_vector_roundtrip(values):
    p = _store(a=np.array(values))
    q = p.from_vector(p.to_vector())
    np.testing.assert_array_equal(q["a"], p["a"])
    assert q.total_count == len(values)
