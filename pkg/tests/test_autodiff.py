import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from dvne import autodiff as ad
from dvne.params import Params

from .conftest import rel_err


def scalar_params(*values):
    p = Params([(f"x{i}", ()) for i in range(len(values))])
    p.values[:] = values
    return p


def test_square_primal_and_gradient():
    p = scalar_params(3.0)
    out, tape = ad.record(lambda th: ad.square(th[0]), p)
    assert out == 9.0
    assert_array_equal(ad.backward(tape, 1.0), [6.0])
    assert_array_equal(p.grad, [6.0])


def test_sin_times_y():
    p = scalar_params(0.0, 2.0)
    _, tape = ad.record(lambda th: ad.mul(ad.sin(th[0]), th[1]), p)
    assert_array_equal(ad.backward(tape), [2.0, 0.0])


def test_backward_twice_is_stale():
    p = scalar_params(1.0)
    _, tape = ad.record(lambda th: ad.exp(th[0]), p)
    ad.backward(tape)
    with pytest.raises(ad.StaleTapeError):
        ad.backward(tape)


def test_empty_computation():
    p = scalar_params(1.0, 2.0)
    out, tape = ad.record(lambda th: 5.0, p)
    assert out == 5.0
    assert len(tape) == 1  # only the watched leaf
    assert_array_equal(ad.backward(tape), [0.0, 0.0])


def test_discarded_tape_leaves_gradients():
    p = scalar_params(1.0, 2.0)
    ad.record(lambda th: ad.sum(ad.square(th)), p)
    assert_array_equal(p.grad, [0.0, 0.0])


def test_unregistered_numpy_function_raises():
    p = scalar_params(1.0, 2.0)
    with pytest.raises(ad.UnsupportedOperationError):
        ad.record(lambda th: np.linalg.det(np.stack([th, th])), p)


def composite(th):
    """Exercises every primitive on a 20-vector."""
    a, b = ad.getitem(th, slice(0, 10)), ad.getitem(th, slice(10, 20))
    M = ad.reshape(ad.getitem(th, slice(0, 9)), (3, 3))
    v = ad.getitem(th, slice(9, 12))
    h = ad.matmul(M, v)
    s = ad.add(ad.mul(ad.sin(a), ad.cos(b)), ad.div(ad.exp(ad.mul(0.1, a)), ad.add(ad.square(b), 1.0)))
    s = ad.sub(s, ad.neg(ad.sqrt(ad.add(ad.square(a), 0.5))))
    s = ad.add(s, ad.maximum(a, ad.mul(0.3, b)))
    s = ad.add(s, ad.relu(ad.tanh(b)))
    s = ad.add(s, ad.mul(ad.sigmoid(a), ad.softplus(b)))
    s = ad.add(s, ad.log(ad.add(ad.square(b), 1.0)))
    r = ad.rnorm(ad.reshape(th, (4, 5)))
    t = ad.transpose(ad.reshape(th, (4, 5)))
    cs = ad.cumsum(ad.mean(t, axis=1), axis=-1)
    w = ad.where(ad.value(a) > 0, a, ad.mul(2.0, b))
    cat = ad.concatenate([ad.stack([cs, cs], axis=0), ad.expand_dims(cs, 0)], axis=0)
    return ad.add(ad.add(ad.sum(s), ad.sum(h)), ad.add(ad.add(ad.sum(r), ad.sum(cat)), ad.sum(ad.square(w))))


def test_composite_primal_matches_untaped(rng):
    for _ in range(20):
        x = rng.normal(size=20)
        taped, _ = ad.record(composite, scalar_params(*x))
        assert taped == composite(x)


def test_composite_gradient_matches_finite_differences(rng):
    for _ in range(20):
        x = rng.normal(size=20)
        # keep the max/where kinks out of the difference stencil
        if np.min(np.abs(x[:10] - 0.3 * x[10:])) < 1e-3 or np.min(np.abs(x[:10])) < 1e-3:
            continue
        p = scalar_params(*x)
        _, tape = ad.record(composite, p)
        g = ad.backward(tape)
        assert rel_err(g, ad.finite_difference_gradient(composite, x)) < 1e-4


PRIMS = {
    "exp": lambda x: ad.exp(x), "sin": lambda x: ad.sin(x), "cos": lambda x: ad.cos(x),
    "sqrt": lambda x: ad.sqrt(ad.add(ad.square(x), 0.1)), "div": lambda x: ad.div(1.0, ad.add(ad.square(x), 0.5)),
    "tanh": lambda x: ad.tanh(x), "sigmoid": lambda x: ad.sigmoid(x), "softplus": lambda x: ad.softplus(x),
    "log": lambda x: ad.log(ad.add(ad.square(x), 0.2)), "max": lambda x: ad.maximum(x, 0.25),
    "rnorm": lambda x: ad.rnorm(ad.reshape(x, (1, -1))),
    "matmul": lambda x: ad.matmul(np.arange(6.0).reshape(2, 3) - 2, x),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients(name, rng):
    f = PRIMS[name]
    worst = 0.0
    for _ in range(1000 // len(PRIMS) + 1):
        x = rng.normal(size=3)
        if name == "max" and np.min(np.abs(x - 0.25)) < 1e-3:
            continue
        _, g = ad.value_and_grad(lambda v: ad.sum(f(v)), x)
        worst = max(worst, rel_err(g, ad.finite_difference_gradient(lambda v: f(v), x)))
    assert worst < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_gradient_of_sum_is_sum_of_gradients(xs):
    x = np.array(xs)
    f = lambda v: ad.sum(ad.sin(v))  # noqa: E731
    g = lambda v: ad.sum(ad.square(v))  # noqa: E731
    _, gf = ad.value_and_grad(f, x)
    _, gg = ad.value_and_grad(g, x)
    _, gs = ad.value_and_grad(lambda v: ad.add(f(v), g(v)), x)
    assert_array_equal(gs, gf + gg)


def test_finite_difference_oracle():
    assert ad.finite_difference_gradient(lambda x: x, np.array([0.7]))[0] == pytest.approx(1.0, abs=1e-9)
    assert_allclose(ad.finite_difference_gradient(lambda x: 3.0, np.ones(4)), 0.0, atol=1e-9)
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 5))
    A = A + A.T
    x = rng.normal(size=5)
    assert rel_err(ad.finite_difference_gradient(lambda v: v @ A @ v, x), 2 * A @ x) < 1e-6
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(lambda v: v, x, step=0.0)


def test_params_gradient_zero_after_reset():
    p = scalar_params(1.0, 2.0)
    _, tape = ad.record(lambda th: ad.sum(ad.square(th)), p)
    ad.backward(tape)
    assert np.any(p.grad != 0)
    p.zero_grad()
    assert_array_equal(p.grad, 0.0)
    assert p.grad.shape == p.values.shape


def test_broadcast_gradients(rng):
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))
    _, gb = ad.value_and_grad(lambda v: ad.sum(ad.mul(a, v)), b)
    assert_allclose(gb, a.sum(0), rtol=1e-15)


def test_getitem_repeated_index_accumulates():
    x = np.array([1.0, 2.0, 3.0])
    _, g = ad.value_and_grad(lambda v: ad.sum(ad.getitem(v, np.array([0, 0, 2]))), x)
    assert_array_equal(g, [2.0, 0.0, 1.0])
