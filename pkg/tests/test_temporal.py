import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from free_env.temporal import Window, backward, forward, init_lstm, lstm_forward

DAYS = [dt.date(2001, 1, 1) + dt.timedelta(days=i) for i in range(10)]


def window(emb):
    return Window("s1", DAYS[: len(emb)], np.asarray(emb))


def sig(x):
    return 1 / (1 + math.exp(-x))


def test_zero_network_predicts_head_bias():
    p = {k: np.zeros_like(v) for k, v in init_lstm(3, 2, np.random.default_rng(0), np.float64).items()}
    p["b_out"][0] = 1.25
    assert np.array_equal(forward(window(np.zeros((5, 3))), p), np.full(5, 1.25))


def test_single_step_hand_computation():
    """W=1, D=1, H=2, hand-evaluated gate equations."""
    p = {"w_x": np.array([[0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8]]),
         "w_h": np.zeros((2, 8)), "b": np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
         "w_out": np.array([2.0, -1.0]), "b_out": np.array([0.5])}
    x = 1.5
    z = [x * w + b for w, b in zip(p["w_x"][0], p["b"])]
    h = []
    for u in range(2):
        i, f, g, o = sig(z[u]), sig(z[2 + u]), math.tanh(z[4 + u]), sig(z[6 + u])
        c = f * 0.0 + i * g
        h.append(o * math.tanh(c))
    expected = 2.0 * h[0] - 1.0 * h[1] + 0.5
    assert forward(window([[x]]), p)[0] == pytest.approx(expected, abs=1e-12)


def test_forget_bias_initialised_to_one():
    p = init_lstm(4, 3, np.random.default_rng(0))
    assert np.array_equal(p["b"], np.r_[np.zeros(3), np.ones(3), np.zeros(6)].astype(np.float32))


def test_dimension_mismatch_and_window_checks():
    p = init_lstm(4, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(window(np.zeros((3, 5))), p)
    with pytest.raises(ValueError):
        Window("s1", [DAYS[0], DAYS[2]], np.zeros((2, 4)))


def test_causality():
    rng = np.random.default_rng(1)
    p = init_lstm(4, 3, rng, np.float64)
    emb = rng.normal(size=(8, 4))
    base = forward(window(emb), p)
    emb2 = emb.copy()
    emb2[5:] += 10.0
    out = forward(window(emb2), p)
    assert np.array_equal(base[:5], out[:5]) and not np.allclose(base[5:], out[5:])


def numeric(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_lstm(4, 3, rng, np.float64)
    p["b_out"][0] = 0.3
    emb = rng.normal(size=(5, 4))
    up = rng.normal(size=5)
    grads, d_emb = backward(window(emb), p, up)
    loss = lambda: float(forward(window(emb), p) @ up)  # noqa: E731
    for name, arr in p.items():
        assert rel(grads[name], numeric(loss, arr)) < 1e-4, name
    assert rel(d_emb, numeric(loss, emb)) < 1e-4


def test_zero_upstream_and_masked_steps():
    rng = np.random.default_rng(0)
    p = init_lstm(4, 3, rng, np.float64)
    emb = rng.normal(size=(6, 4))
    grads, d_emb = backward(window(emb), p, np.zeros(6))
    assert all(not g.any() for g in grads.values()) and not d_emb.any()
    up = np.array([1.0, 0.0, 2.0, 0.0, 0.0, 0.0])
    g_full, _ = backward(window(emb), p, up)
    g_short, _ = backward(window(emb[:3]), p, up[:3])
    for k in g_full:
        np.testing.assert_allclose(g_full[k], g_short[k], atol=1e-12)


def test_batch_matches_single_windows():
    rng = np.random.default_rng(2)
    p = init_lstm(4, 3, rng, np.float64)
    emb = rng.normal(size=(3, 7, 4))
    preds, _ = lstm_forward(emb, p)
    for b in range(3):
        np.testing.assert_allclose(preds[b], forward(window(emb[b]), p), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**16))
def test_predictions_bounded_by_head(W, seed):
    """|pred - b_out| <= sum|w_out| since |h| < 1."""
    rng = np.random.default_rng(seed)
    p = init_lstm(4, 3, rng, np.float64)
    out = forward(window(rng.normal(scale=5, size=(W, 4))), p)
    assert np.all(np.abs(out - p["b_out"][0]) <= np.abs(p["w_out"]).sum() + 1e-12)
