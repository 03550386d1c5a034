import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amsghmc import autodiff as ad


def composite(xs):
    """Smooth four-variable scalar exercising every smooth primitive."""
    a = ad.tanh(xs[0] * xs[1])
    b = ad.exp(-(xs[2] ** 2)) * ad.sigmoid(xs[0] - xs[3])
    c = ad.log(1.0 + xs[1] ** 2)
    d = ad.sqrt(1.0 + xs[3] ** 2)
    return a + b + c / d


def fd_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(list(xp)) - f(list(xm))) / (2 * h)
    return g


def test_square_frozen():
    v, g = ad.evaluate_with_gradient(lambda xs: xs[0] * xs[0], [3.0])
    assert v == 9.0
    assert g.tolist() == [6.0]


def test_sum_frozen():
    v, g = ad.evaluate_with_gradient(lambda xs: xs[0] + xs[1] + xs[2], [1.0, 2.0, 4.0])
    assert v == 7.0
    assert g.tolist() == [1.0, 1.0, 1.0]


def test_log_sigmoid_frozen():
    v, g = ad.evaluate_with_gradient(lambda xs: ad.log(ad.sigmoid(xs[0])), [0.0])
    assert v == pytest.approx(-0.6931471805599453, abs=1e-15)
    assert g[0] == pytest.approx(0.5, abs=1e-15)


def test_sigmoid_partial_frozen():
    assert ad.partial(lambda xs: ad.sigmoid(xs[0]), [0.0], 0) == pytest.approx(0.25, abs=1e-15)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.uniform(-2.0, 2.0, size=4)
        _, g = ad.evaluate_with_gradient(composite, list(x))
        fd = fd_gradient(composite, x)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_forward_partial_matches_reverse_gradient():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rng.uniform(-2.0, 2.0, size=4)
        _, g = ad.evaluate_with_gradient(composite, list(x))
        for i in range(4):
            p = ad.partial(composite, list(x), i)
            assert abs(p - g[i]) <= 1e-12


def test_nested_partial_differentiates_wrt_parameter():
    # d/dw of dF/dx0 for F(x; w) = tanh(w x0) + w x1^2, against a finite
    # difference over w of the forward-mode partial.
    x = [0.7, -1.3]
    w0 = 0.4

    def make(w):
        def F(xs):
            return ad.tanh(w * xs[0]) + w * xs[1] ** 2

        return F

    tape = ad.Tape()
    wv = tape.leaf(w0)
    pv = ad.partial(make(wv), x, 0, tape=tape)
    (dw,) = tape.gradient(pv, [wv])
    h = 1e-6
    fd = (ad.partial(make(w0 + h), x, 0) - ad.partial(make(w0 - h), x, 0)) / (2 * h)
    assert abs(float(ad.value_of(dw)) - fd) <= 1e-4
    # Analytic check: d/dw [w (1 - tanh^2(w x0))].
    t = np.tanh(w0 * x[0])
    analytic = (1 - t**2) - 2 * w0 * t * (1 - t**2) * x[0]
    assert abs(float(ad.value_of(dw)) - analytic) <= 1e-10


def test_replay_is_bit_exact():
    tape = ad.Tape()
    xs = [tape.leaf(v) for v in (0.3, -1.2, 2.5)]
    y = ad.tanh(xs[0] * xs[1]) + ad.exp(xs[2]) / (1.0 + xs[1] ** 2)
    z = ad.leaky_relu(y - 3.0) + ad.sqrt(ad.sigmoid(xs[2]))
    w = tape.affine([(xs[0], xs[1]), (z, 2.0), (3.0, 4.0)], bias=0.5)
    assert w is not None
    replayed = tape.replay()
    assert len(replayed) == len(tape.values)
    for new, old in zip(replayed, tape.values):
        assert new == old


def test_replay_tracks_changed_leaf():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    y = x * x + 1.0
    tape.values[x.idx] = 3.0
    replayed = tape.replay()
    assert replayed[y.idx] == 10.0


def test_nonfinite_failure_carries_node_index():
    with np.errstate(invalid="ignore"), pytest.raises(ad.EvaluationFailure) as exc:
        ad.evaluate_with_gradient(lambda xs: ad.log(xs[0]), [-1.0])
    assert exc.value.node_index == 1
    assert exc.value.op == "log"
    assert "node 1" in str(exc.value)


def test_unused_leaf_has_zero_adjoint():
    _, g = ad.evaluate_with_gradient(lambda xs: xs[0] * xs[0], [2.0, 5.0])
    assert g.tolist() == [4.0, 0.0]


def test_partial_out_of_range_raises():
    with pytest.raises(IndexError):
        ad.partial(lambda xs: xs[0], [1.0], 3)


def test_batched_values_broadcast_and_reduce():
    # A scalar leaf multiplied into an array-valued node must receive the
    # summed adjoint over the batch axis.
    tape = ad.Tape()
    s = tape.leaf(1.5)
    batch = tape.leaf(np.array([1.0, 2.0, 3.0]))
    y = ad.tanh(s * batch)
    total = tape.inject(
        float(np.sum(y.value)), [y], [np.ones(3)]
    )
    gs, gb = tape.gradient(total, [s, batch])
    sech2 = 1.0 - np.tanh(1.5 * np.array([1.0, 2.0, 3.0])) ** 2
    assert gs == pytest.approx(float(np.sum(sech2 * np.array([1.0, 2.0, 3.0]))), rel=1e-12)
    np.testing.assert_allclose(gb, sech2 * 1.5, rtol=1e-12)


def test_affine_matches_unfused_form():
    tape = ad.Tape()
    xs = [tape.leaf(v) for v in (0.2, -0.7, 1.1)]
    ws = [tape.leaf(v) for v in (1.3, 0.4, -2.2)]
    fused = tape.affine(list(zip(xs, ws)), bias=0.25)
    loose = xs[0] * ws[0] + xs[1] * ws[1] + xs[2] * ws[2] + 0.25
    assert fused.value == pytest.approx(loose.value, abs=1e-15)
    gf = tape.gradient(fused, xs + ws)
    gl = tape.gradient(loose, xs + ws)
    np.testing.assert_allclose(gf, gl, rtol=1e-15)


def test_inject_routes_custom_partials():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    y = x * 3.0
    z = tape.inject(42.0, [y], [5.0])
    (g,) = tape.gradient(z, [x])
    assert g == 15.0
    assert tape.replay()[z.idx] == 42.0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_linear_gradient_is_coefficients(coeffs):
    def f(xs):
        out = xs[0] * coeffs[0]
        for c, xi in zip(coeffs[1:], xs[1:]):
            out = out + xi * c
        return out

    x = [1.0] * len(coeffs)
    _, g = ad.evaluate_with_gradient(f, x)
    np.testing.assert_allclose(g, coeffs, rtol=1e-12, atol=1e-12)


@settings(max_examples=50)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_product_rule(a, b):
    _, g = ad.evaluate_with_gradient(lambda xs: xs[0] * xs[1], [a, b])
    np.testing.assert_allclose(g, [b, a], rtol=1e-15, atol=0)


@settings(max_examples=50)
@given(st.floats(-20, 20))
def test_sigmoid_derivative_identity(x):
    p = ad.partial(lambda xs: ad.sigmoid(xs[0]), [x], 0)
    s = 1.0 / (1.0 + np.exp(-x))
    assert p == pytest.approx(s * (1 - s), abs=1e-12)


@settings(max_examples=30)
@given(st.floats(-5, -1e-3) | st.floats(1e-3, 5))
def test_leaky_relu_slopes(x):
    p = ad.partial(lambda xs: ad.leaky_relu(xs[0]), [x], 0)
    assert p == (1.0 if x > 0 else 0.01)


def test_leaky_relu_at_zero_uses_negative_side_slope():
    p = ad.partial(lambda xs: ad.leaky_relu(xs[0]), [0.0], 0)
    assert p == 0.01
