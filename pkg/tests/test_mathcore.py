import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossnav.mathcore import (AdamHyper, AdamState, AttentionParams, NumericError, ShapeError,
                               adam_step, affine, affine_backward, attention_backward,
                               dot_product_attention, grad_check, lstm_backward, lstm_step,
                               softmax, softmax_backward)

finite = st.floats(-1, 1, allow_nan=False)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_ln2():
    np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_large_logit_no_overflow():
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(math.exp(-1000.0), abs=1e-300)


def test_softmax_errors():
    with pytest.raises(ValueError):
        softmax([])
    with pytest.raises(NumericError):
        softmax([0.0, float("nan")])


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    p = softmax(x)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0) or x.max() - x.min() > 700
    np.testing.assert_allclose(softmax(x + c), p, atol=1e-12)


def test_softmax_backward_matches_jacobian():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 5)
    p = softmax(x)
    dp = rng.uniform(-1, 1, 5)
    jac = np.diag(p) - np.outer(p, p)
    np.testing.assert_allclose(softmax_backward(p, dp), jac.T @ dp, atol=1e-15)


# ---------------------------------------------------------------- attention

IDENT = AttentionParams(np.eye(1), np.eye(1))


def test_attention_zero_query_uniform():
    ctx, w = dot_product_attention(np.array([0.0]), np.array([[1.0], [3.0]]), IDENT)
    np.testing.assert_allclose(ctx, [2.0])
    np.testing.assert_allclose(w, [0.5, 0.5])


def test_attention_sharp_query():
    ctx, w = dot_product_attention(np.array([10.0]), np.array([[1.0], [3.0]]), IDENT)
    # two-way softmax of scores 10 and 30 is a logistic of the difference
    lo = 1.0 / (1.0 + math.exp(20.0))
    np.testing.assert_allclose(w, [lo, 1.0 - lo], rtol=1e-12)
    assert w[0] == pytest.approx(2.06e-9, rel=1e-2)
    np.testing.assert_allclose(ctx, [3.0 - 2.0 * lo], rtol=1e-12)


def test_attention_singleton():
    ctx, w = dot_product_attention(np.array([0.3]), np.array([[7.0]]), IDENT)
    np.testing.assert_allclose(ctx, [7.0])
    np.testing.assert_allclose(w, [1.0])


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        AttentionParams(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        dot_product_attention(np.ones(3), np.ones((2, 2)), AttentionParams(np.ones((2, 3)), np.ones((2, 3))))


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32 - 1))
def test_attention_weights_are_softmax_and_context_in_hull(seed):
    rng = np.random.default_rng(seed)
    q, feats = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, (4, 5))
    params = AttentionParams(rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, (5, 2)))
    ctx, w = dot_product_attention(q, feats, params)
    scores = np.array([(q @ params.proj_query) @ (f @ params.proj_key) for f in feats])
    np.testing.assert_allclose(w, softmax(scores), atol=1e-15)
    assert np.all(ctx <= feats.max(axis=0) + 1e-12) and np.all(ctx >= feats.min(axis=0) - 1e-12)


def test_attention_backward_fd():
    rng = np.random.default_rng(1)
    q, feats = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, (4, 5))
    P = {"q": q, "f": feats, "Wq": rng.uniform(-1, 1, (3, 2)), "Wk": rng.uniform(-1, 1, (5, 2))}
    r = rng.uniform(-1, 1, 5)

    def loss(p):
        return float(r @ dot_product_attention(p["q"], p["f"], AttentionParams(p["Wq"], p["Wk"]))[0])

    params = AttentionParams(P["Wq"], P["Wk"])
    _, _, cache = dot_product_attention(q, feats, params, return_cache=True)
    dq, df, dwq, dwk = attention_backward(cache, params, r)
    assert grad_check(loss, P, {"q": dq, "f": df, "Wq": dwq, "Wk": dwk}) < 1e-6


# ---------------------------------------------------------------- LSTM

def test_lstm_zero_everything():
    W, b = np.zeros((3 + 2, 8)), np.zeros(8)
    h, c = lstm_step(np.array([0.4, -1.0, 2.0]), (np.zeros(2), np.zeros(2)), W, b)
    assert np.all(h == 0) and np.all(c == 0)


def test_lstm_zero_weights_unit_cell():
    W, b = np.zeros((1 + 1, 4)), np.zeros(4)
    h, c = lstm_step(np.array([5.0]), (np.zeros(1), np.array([1.0])), W, b)
    assert c[0] == pytest.approx(0.5, abs=1e-15)
    assert h[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-15)


def _reference_lstm(x, h, c, W, b):
    # independent scalar-loop formulation of the standard cell
    H = h.size
    xh = list(x) + list(h)
    z = [sum(xh[r] * W[r][k] for r in range(len(xh))) + b[k] for k in range(4 * H)]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    hn, cn = [], []
    for j in range(H):
        i, f, g, o = sig(z[j]), sig(z[H + j]), math.tanh(z[2 * H + j]), sig(z[3 * H + j])
        cj = f * c[j] + i * g
        cn.append(cj)
        hn.append(o * math.tanh(cj))
    return np.array(hn), np.array(cn)


def test_lstm_matches_reference():
    rng = np.random.default_rng(3)
    x, h, c = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    W, b = rng.uniform(-1, 1, (7, 12)), rng.uniform(-1, 1, 12)
    got = lstm_step(x, (h, c), W, b)
    want = _reference_lstm(x, h, c, W, b)
    np.testing.assert_allclose(got[0], want[0], atol=1e-14)
    np.testing.assert_allclose(got[1], want[1], atol=1e-14)


def test_lstm_shape_error():
    with pytest.raises(ShapeError):
        lstm_step(np.ones(3), (np.zeros(2), np.zeros(2)), np.zeros((4, 8)), np.zeros(8))


def test_lstm_backward_fd():
    rng = np.random.default_rng(4)
    P = {"x": rng.uniform(-1, 1, 3), "h": rng.uniform(-1, 1, 2), "c": rng.uniform(-1, 1, 2),
         "W": rng.uniform(-1, 1, (5, 8)), "b": rng.uniform(-1, 1, 8)}
    rh, rc = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)

    def loss(p):
        h, c = lstm_step(p["x"], (p["h"], p["c"]), p["W"], p["b"])
        return float(rh @ h + rc @ c)

    _, _, cache = lstm_step(P["x"], (P["h"], P["c"]), P["W"], P["b"], return_cache=True)
    dx, dh, dc, dW, db = lstm_backward(cache, P["W"], rh, rc)
    assert grad_check(loss, P, {"x": dx, "h": dh, "c": dc, "W": dW, "b": db}) < 1e-6


# ---------------------------------------------------------------- affine

def test_affine_examples():
    np.testing.assert_array_equal(affine(np.array([1.0, 2.0]), np.eye(2), np.zeros(2)), [1.0, 2.0])
    np.testing.assert_array_equal(affine(np.array([1.0]), np.array([[3.0]]), np.array([4.0])), [7.0])
    with pytest.raises(ShapeError):
        affine(np.ones(2), np.ones((3, 2)), np.zeros(2))


def test_affine_matches_loops():
    rng = np.random.default_rng(5)
    x, W, b = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, 3)
    want = [sum(x[i] * W[i, j] for i in range(4)) + b[j] for j in range(3)]
    np.testing.assert_allclose(affine(x, W, b), want, atol=1e-15)
    r = rng.uniform(-1, 1, 3)
    dx, dW, db = affine_backward(x, W, r)
    P = {"x": x, "W": W, "b": b}
    assert grad_check(lambda p: float(r @ affine(p["x"], p["W"], p["b"])), P,
                      {"x": dx, "W": dW, "b": db}) < 1e-8


# ---------------------------------------------------------------- Adam

def test_adam_zero_grad_fixpoint():
    p = {"w": np.array([1.0, -2.0])}
    new, st_ = adam_step(p, {"w": np.zeros(2)}, AdamState(), AdamHyper())
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st_.step == 1


def test_adam_first_step_is_signed_lr():
    p, g, lr, eps = {"w": np.array([0.0])}, {"w": np.array([0.3])}, 0.01, 1e-8
    new, _ = adam_step(p, g, AdamState(), AdamHyper(lr=lr, eps=eps))
    # bias-corrected m = g, sqrt(v) = |g|
    assert new["w"][0] == pytest.approx(-lr * 0.3 / (0.3 + eps), rel=1e-12)


def test_adam_deterministic_and_pure():
    rng = np.random.default_rng(6)
    p = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=3)}
    g = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=3)}
    s0 = AdamState.for_params(p)
    before = {k: v.copy() for k, v in p.items()}
    out1 = adam_step(p, g, s0, AdamHyper(weight_decay=5e-4))
    out2 = adam_step(p, g, s0, AdamHyper(weight_decay=5e-4))
    for k in p:
        np.testing.assert_array_equal(out1[0][k], out2[0][k])
        np.testing.assert_array_equal(p[k], before[k])
        assert np.all(out1[1].v[k] >= 0)


def test_adam_weight_decay_enters_gradient():
    p = {"w": np.array([2.0])}
    hyper = AdamHyper(lr=0.1, weight_decay=0.5)
    new, st_ = adam_step(p, {"w": np.array([0.0])}, AdamState(), hyper)
    assert st_.m["w"][0] == pytest.approx(0.1 * 0.5 * 2.0)
    assert new["w"][0] < 2.0


def test_adam_name_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, AdamState(), AdamHyper())
    with pytest.raises(ShapeError):
        adam_step({"a": np.zeros(1)}, {"a": np.zeros(2)}, AdamState(), AdamHyper())


# ---------------------------------------------------------------- grad_check

def test_grad_check_quadratic():
    err = grad_check(lambda p: float(p["x"][0] ** 2), {"x": np.array([3.0])}, {"x": np.array([6.0])},
                     epsilon=1e-5)
    assert err < 1e-8


def test_grad_check_detects_wrong_gradient():
    err = grad_check(lambda p: float(p["x"][0] ** 2), {"x": np.array([3.0])}, {"x": np.array([5.0])})
    assert err > 0.1


def test_grad_check_nonfinite():
    with pytest.raises(NumericError):
        grad_check(lambda p: float("inf"), {"x": np.array([1.0])}, {"x": np.array([0.0])})
    with pytest.raises(ValueError):
        grad_check(lambda p: 0.0, {"x": np.array([1.0])}, {"x": np.array([0.0])}, epsilon=0)
