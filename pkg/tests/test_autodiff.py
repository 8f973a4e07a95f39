import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfg import autodiff as ad
from gfg.errors import DomainError


def grad_at(f, *point):
    tape = ad.Tape()
    xs = [tape.variable(float(p)) for p in point]
    out = f(*xs)
    g = ad.backward(out)
    return out.value, [g[x] for x in xs]


def central(f, point, i, h=1e-5):
    up, down = list(point), list(point)
    up[i] += h
    down[i] -= h
    return (f(*up) - f(*down)) / (2 * h)


def test_primitive_values():
    assert ad.mul(3, 4) == 12
    assert abs(ad.log(ad.exp(2.0)) - 2.0) < 1e-12
    with pytest.raises(DomainError):
        ad.log(-1.0)
    with pytest.raises(DomainError):
        ad.div(1.0, 0.0)


def test_stop_gradient():
    _, (d,) = grad_at(lambda x: ad.mul(ad.stop_gradient(x), x), 3.0)
    assert d == 3.0
    _, (d,) = grad_at(lambda x: ad.add(ad.stop_gradient(x), 0.0), 5.0)
    assert d == 0.0
    _, (d,) = grad_at(lambda x: ad.add(x, ad.stop_gradient(ad.mul(x, x))), 2.0)
    assert d == 1.0


def test_backward_examples():
    _, (d,) = grad_at(lambda x: ad.mul(x, x), 3.0)
    assert d == 6.0
    _, (dx, dy) = grad_at(lambda x, y: ad.mul(x, ad.exp(y)), 2.0, 0.0)
    assert (dx, dy) == (1.0, 2.0)


def test_operator_overloads_match_functions():
    tape = ad.Tape()
    x = tape.variable(1.5)
    y = (x * 2 - 1) / (x + 3) + x**2 - (-x)
    assert y.value == pytest.approx((1.5 * 2 - 1) / 4.5 + 1.5**2 + 1.5)
    g = ad.backward(y)
    fd = central(lambda v: (v * 2 - 1) / (v + 3) + v**2 + v, [1.5], 0)
    assert g[x] == pytest.approx(fd, rel=1e-6)


def test_random_ten_op_expression():
    rng = np.random.default_rng(11)
    unary = [ad.exp, ad.tanh, ad.sigmoid, ad.softplus, lambda a: ad.log(ad.add(ad.mul(a, a), 1.0))]
    binary = [ad.add, ad.sub, ad.mul, lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0))]
    for _ in range(25):
        plan = [(rng.integers(2), rng.integers(5), rng.integers(4), rng.integers(3)) for _ in range(10)]

        def f(x, y, z):
            vals = [x, y, z]
            for kind, u, b, j in plan:
                if kind == 0:
                    vals.append(unary[u](vals[-1]))
                else:
                    vals.append(binary[b](vals[-1], vals[j]))
            return vals[-1]

        point = rng.uniform(-1.0, 1.0, size=3)
        _, grads = grad_at(f, *point)
        for i in range(3):
            fd = central(f, point, i)
            assert abs(grads[i] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_array_values_and_sum():
    tape = ad.Tape()
    x = tape.variable(np.array([1.0, 2.0, 3.0]))
    s = ad.sum(ad.mul(x, x))
    assert s.value == 14.0
    assert np.array_equal(ad.backward(s)[x], [2.0, 4.0, 6.0])
    w = tape.variable(2.0)
    out = ad.sum(ad.mul(w, x))  # broadcast scalar leaf
    assert ad.backward(out)[w] == 6.0


def test_logsumexp_gradient_is_softmax():
    tape = ad.Tape()
    xs = [tape.variable(v) for v in (0.1, -0.4, 1.3)]
    out = ad.logsumexp(xs)
    g = ad.backward(out)
    soft = np.exp([0.1, -0.4, 1.3]) / np.exp([0.1, -0.4, 1.3]).sum()
    assert out.value == pytest.approx(math.log(np.exp([0.1, -0.4, 1.3]).sum()))
    assert [g[x] for x in xs] == pytest.approx(list(soft))


def test_tapes_do_not_mix():
    a, b = ad.Tape().variable(1.0), ad.Tape().variable(2.0)
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_untaped_inputs_stay_plain():
    assert ad.add(1.0, 2.0) == 3.0
    assert ad.stop_gradient(4.0) == 4.0


def test_named_leaves():
    tape = ad.Tape()
    x = tape.variable(1.0, name="x")
    assert tape.leaves["x"] is x


PRIMITIVES = {
    "exp": (ad.exp, (-3.0, 3.0)),
    "log": (ad.log, (0.1, 5.0)),
    "tanh": (ad.tanh, (-3.0, 3.0)),
    "sigmoid": (ad.sigmoid, (-5.0, 5.0)),
    "softplus": (ad.softplus, (-5.0, 5.0)),
    "neg": (ad.neg, (-5.0, 5.0)),
}


@settings(max_examples=100, deadline=None)
@given(name=st.sampled_from(sorted(PRIMITIVES)), u=st.floats(0.0, 1.0))
def test_unary_primitives_match_central_differences(name, u):
    fn, (lo, hi) = PRIMITIVES[name]
    x = lo + u * (hi - lo)
    _, (d,) = grad_at(fn, x)
    fd = central(fn, [x], 0)
    assert abs(d - fd) <= 1e-4 * max(1.0, abs(fd))


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": ad.div,
    "pow": ad.pow,
}


@settings(max_examples=100, deadline=None)
@given(name=st.sampled_from(sorted(BINARY)), a=st.floats(0.2, 3.0), b=st.floats(0.2, 3.0))
def test_binary_primitives_match_central_differences(name, a, b):
    fn = BINARY[name]
    _, grads = grad_at(fn, a, b)
    for i in range(2):
        fd = central(fn, [a, b], i)
        assert abs(grads[i] - fd) <= 1e-4 * max(1.0, abs(fd))


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(-2.0, 2.0),
    y=st.floats(-2.0, 2.0),
    a=st.floats(-3.0, 3.0),
    b=st.floats(-3.0, 3.0),
)
def test_backward_is_linear(x, y, a, b):
    def f(u, v):
        return ad.mul(ad.tanh(u), ad.exp(v))

    def h(u, v):
        return ad.add(ad.mul(u, v), ad.sigmoid(u))

    _, gf = grad_at(f, x, y)
    _, gh = grad_at(h, x, y)
    _, gc = grad_at(lambda u, v: ad.add(ad.mul(a, f(u, v)), ad.mul(b, h(u, v))), x, y)
    for i in range(2):
        assert gc[i] == pytest.approx(a * gf[i] + b * gh[i], abs=1e-12)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_stop_gradient_is_identity_on_values(x):
    tape = ad.Tape()
    v = tape.variable(x)
    assert ad.stop_gradient(v).value == x
