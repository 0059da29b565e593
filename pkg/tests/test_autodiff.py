import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from batchrl import autodiff as ad
from batchrl.exceptions import ConfigurationError, DomainError, GraphStateError


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "exp": ad.exp,
    "square": lambda v: v * v,
    "leaky": ad.leaky_relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn = UNARY[name]
    g = ad.Graph()
    x = g.input()
    p = g.param()
    g.output(ad.sum_last(fn(x * p)))
    X = rng.normal(size=(4, 3))
    P = rng.normal(size=3)
    g.forward([X], [P])
    (grad,) = g.backward(0)

    def f(pv):
        return g.forward([X], [pv])[0].sum()

    np.testing.assert_allclose(grad, numeric_grad(f, P), rtol=1e-6, atol=1e-8)


def test_log_sqrt_div_on_positive_domain(rng):
    g = ad.Graph()
    p = g.param()
    g.output(ad.sum_last(ad.log(p) + ad.sqrt(p) / (1.0 + p) - p**2))
    P = rng.uniform(0.5, 2.0, size=4)
    g.forward([], [P])
    (grad,) = g.backward(0)
    expect = 1 / P + (0.5 / np.sqrt(P) * (1 + P) - np.sqrt(P)) / (1 + P) ** 2 - 2 * P
    np.testing.assert_allclose(grad, expect, rtol=1e-12)


def test_linear_and_per_sample_gradients(rng):
    g = ad.Graph()
    x = g.input()
    W = g.param()
    b = g.param()
    g.output(ad.sum_last(ad.tanh(ad.linear(x, W) + b)))
    X = rng.normal(size=(5, 3))
    Wv, bv = rng.normal(size=(2, 3)), rng.normal(size=2)
    g.forward([X], [Wv, bv])
    gW, gb = g.backward(0)
    g.forward([X], [Wv, bv])
    pW, pb = g.backward(0, per_sample=True)
    assert pW.shape == (5, 2, 3) and pb.shape == (5, 2)
    np.testing.assert_allclose(pW.sum(0), gW, rtol=1e-12)
    np.testing.assert_allclose(pb.sum(0), gb, rtol=1e-12)
    # each row depends only on its own sample
    for k in range(5):
        def f(wv):
            return g.forward([X[k : k + 1]], [wv, bv])[0].sum()

        np.testing.assert_allclose(pW[k], numeric_grad(f, Wv), rtol=1e-6, atol=1e-9)


def test_gaussian_logpdf_closed_form(rng):
    g = ad.Graph()
    u = g.input()
    m = g.param()
    s = g.param()
    g.output(ad.gaussian_log_density(u, m, s))
    U = rng.normal(size=(6, 2))
    M, S = rng.normal(size=2), rng.uniform(0.3, 2, size=2)
    (val,) = g.forward([U], [M, S])
    expect = np.sum(-0.5 * ((U - M) / S) ** 2 - np.log(S) - 0.5 * np.log(2 * np.pi), axis=1)
    np.testing.assert_allclose(val, expect, rtol=1e-13)
    gm, gs = g.backward(0)
    np.testing.assert_allclose(gm, np.sum((U - M) / S**2, axis=0), rtol=1e-12)
    np.testing.assert_allclose(gs, np.sum(((U - M) ** 2 / S**3) - 1 / S, axis=0), rtol=1e-12)


def test_numpy_dispatch_matches_graph(rng):
    X = rng.normal(size=(3, 4))
    direct = ad.softplus(ad.tanh(X)) * 2.0
    g = ad.Graph()
    x = g.input()
    g.output(ad.softplus(ad.tanh(x)) * 2.0)
    np.testing.assert_array_equal(g.forward([X], [])[0], direct)


def test_leaky_relu_subgradient_at_zero():
    g = ad.Graph()
    p = g.param()
    g.output(ad.sum_last(ad.leaky_relu(p)))
    g.forward([], [np.array([-1.0, 0.0, 2.0])])
    (grad,) = g.backward(0)
    np.testing.assert_array_equal(grad, [ad.LEAKY_SLOPE, ad.LEAKY_SLOPE, 1.0])


def test_errors():
    g = ad.Graph()
    x = g.input()
    p = g.param()
    g.output(ad.sum_last(x * p))
    with pytest.raises(GraphStateError):
        g.backward(0)
    with pytest.raises(ConfigurationError):
        g.forward([], [np.ones(2)])
    with pytest.raises(ConfigurationError):
        g.forward([np.ones((1, 2))], [])
    with pytest.raises(DomainError):
        ad.gaussian_log_density(np.zeros(2), np.zeros(2), np.array([1.0, 0.0]))


def test_adjoints_reset_between_calls(rng):
    g = ad.Graph()
    p = g.param()
    g.output(ad.sum_last(p * p))
    P = rng.normal(size=3)
    g.forward([], [P])
    a = g.backward(0)[0]
    b = g.backward(0)[0]
    np.testing.assert_array_equal(a, b)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_chain_rule_scalar(a, b):
    g = ad.Graph()
    p = g.param()
    g.output(ad.sum_last(ad.tanh(p * a + b) ** 2))
    g.forward([], [np.array([0.7])])
    (grad,) = g.backward(0)
    t = np.tanh(0.7 * a + b)
    assert grad[0] == pytest.approx(2 * t * (1 - t * t) * a, rel=1e-12, abs=1e-15)
