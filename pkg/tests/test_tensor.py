import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcde import tensor as T
from bcde.tensor import (
    DomainError,
    Parameter,
    ShapeError,
    Tape,
    apply_primitive,
    backward,
    grad_check,
)


def _check(f, params, tol=1e-6):
    rep = grad_check(f, params, tol=tol)
    assert rep.ok, rep.max_error
    return rep


UNARY = {
    "negate": lambda t: -t,
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "tanh": T.tanh,
    "square": T.square,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    p = Parameter("p", rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    _check(lambda tape: (UNARY[name](tape.watch(p)) * w).sum(), [p])


def test_log_gradient_and_domain(rng):
    p = Parameter("p", rng.uniform(0.5, 2.0, size=(5,)))
    _check(lambda tape: T.log(tape.watch(p)).sum(), [p])
    with pytest.raises(DomainError):
        T.log(T.as_tensor(np.array([1.0, 0.0])))
    with pytest.raises(DomainError):
        T.log(T.as_tensor(np.array([-1.0])))


def test_relu_away_from_kink_and_subgradient_at_zero(rng):
    p = Parameter("p", rng.choice([-1, 1], size=(4, 3)) * rng.uniform(0.1, 1.0, size=(4, 3)))
    _check(lambda tape: (T.relu(tape.watch(p)) * 2.0).sum(), [p])
    z = Parameter("z", np.zeros(3))
    tape = Tape()
    g = backward(tape, T.relu(tape.watch(z)).sum())
    np.testing.assert_array_equal(g["z"], np.zeros(3))


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_broadcasting_binary_gradients(op, rng):
    a = Parameter("a", rng.normal(size=(4, 3)))
    b = Parameter("b", rng.normal(size=(3,)))
    c = Parameter("c", rng.normal(size=(4, 1)))
    w = rng.normal(size=(4, 3))

    def f(tape):
        ab = apply_primitive(op, [tape.watch(a), tape.watch(b)])
        return (apply_primitive(op, [ab, tape.watch(c)]) * w).sum()

    _check(f, [a, b, c])


def test_matmul_gradient(rng):
    a = Parameter("a", rng.normal(size=(5, 3)))
    b = Parameter("b", rng.normal(size=(3, 2)))
    _check(lambda tape: T.tanh(tape.watch(a) @ tape.watch(b)).sum(), [a, b])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.as_tensor(np.ones((2, 3))) @ T.as_tensor(np.ones((2, 3)))


def test_reductions_concat_slice_clip(rng):
    a = Parameter("a", rng.normal(size=(4, 3)))
    b = Parameter("b", rng.normal(size=(4, 2)))
    w = rng.normal(size=(4, 5))

    def f(tape):
        cat = T.concat([tape.watch(a), tape.watch(b)], axis=1) * w
        part = T.take(cat, 1, 4, axis=1)
        return part.mean(axes=0).sum() + cat.sum(axes=1).square().sum() + T.clip(tape.watch(a), -0.5, 0.5).sum()

    _check(f, [a, b])


def test_clip_gradient_zero_outside(rng):
    p = Parameter("p", np.array([-2.0, 0.0, 3.0]))
    tape = Tape()
    g = backward(tape, T.clip(tape.watch(p), -1.0, 1.0).sum())
    np.testing.assert_array_equal(g["p"], [0.0, 1.0, 0.0])


def test_unreached_parameter_gets_zero_and_frozen_is_skipped(rng):
    a = Parameter("a", rng.normal(size=3))
    b = Parameter("b", rng.normal(size=2))
    frozen = Parameter("f", rng.normal(size=3), trainable=False)
    tape = Tape()
    tape.watch(b)
    out = (tape.watch(a) * tape.watch(frozen)).sum()
    g = backward(tape, out)
    np.testing.assert_allclose(g["a"], frozen.data)
    np.testing.assert_array_equal(g["b"], 0.0)
    assert "f" not in g


def test_backward_requires_scalar_and_single_use(rng):
    a = Parameter("a", rng.normal(size=3))
    tape = Tape()
    y = tape.watch(a) * 2.0
    with pytest.raises(ShapeError):
        backward(tape, y)
    s = y.sum()
    backward(tape, s)
    with pytest.raises(RuntimeError):
        backward(tape, s)


def test_reused_node_accumulates(rng):
    a = Parameter("a", rng.normal(size=3))
    tape = Tape()
    x = tape.watch(a)
    g = backward(tape, (x * x + x).sum())
    np.testing.assert_allclose(g["a"], 2 * a.data + 1)


def test_backward_visits_each_record_once(monkeypatch, rng):
    a = Parameter("a", rng.normal(size=(2, 2)))
    tape = Tape()
    x = tape.watch(a)
    for _ in range(50):
        x = T.tanh(x) + x
    root = x.sum()
    calls = []
    orig = T.PRIMITIVES["tanh"]
    monkeypatch.setitem(T.PRIMITIVES, "tanh", T.Primitive(orig.arity, orig.forward,
                        lambda *args: calls.append(1) or orig.backward(*args)))
    backward(tape, root)
    assert len(calls) == 50


def test_detached_computation_records_nothing():
    out = T.exp(T.as_tensor(np.ones(3))) + 1.0
    assert out.tape is None


def test_duplicate_parameter_names_rejected():
    tape = Tape()
    tape.watch(Parameter("w", np.ones(2)))
    with pytest.raises(ValueError):
        tape.watch(Parameter("w", np.ones(2)))


def test_grad_check_flags_wrong_gradient(monkeypatch, rng):
    p = Parameter("p", rng.normal(size=4))
    orig = T.PRIMITIVES["square"]
    monkeypatch.setitem(T.PRIMITIVES, "square", T.Primitive(1, orig.forward, lambda g, xs, o, s, a: (3.0 * xs[0] * g,)))
    rep = grad_check(lambda tape: T.square(tape.watch(p)).sum(), [p])
    assert not rep.ok
    assert rep.worst > 0.1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_sum_of_broadcast_add_gradient_counts_rows(x):
    b = Parameter("b", np.zeros(x.shape[1]))
    tape = Tape()
    g = backward(tape, (T.as_tensor(x) + tape.watch(b)).sum())
    np.testing.assert_array_equal(g["b"], np.full(x.shape[1], float(x.shape[0])))


@settings(max_examples=40, deadline=None)
@given(st.floats(-30, 30, allow_nan=False))
def test_softplus_matches_log1p_exp(v):
    got = T.softplus(T.as_tensor(np.array([v]))).data[0]
    np.testing.assert_allclose(got, np.logaddexp(0.0, v), rtol=1e-12, atol=1e-300)
