"""Single-layer LSTM over per-day embeddings with a per-step linear head."""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

Params = Dict[str, np.ndarray]
LSTM_TENSORS = ("w_x", "w_h", "b", "w_out", "b_out")


@dataclass
class Window:
    """W consecutive days of one site; labels/mask are per step."""

    site_id: str
    dates: List[dt.date]
    embeddings: np.ndarray
    labels: Optional[np.ndarray] = None
    label_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise ValueError("window dates must be consecutive days")
        if len(self.embeddings) != len(self.dates):
            raise ValueError("one embedding per date required")
        if self.label_mask is None:
            self.label_mask = np.zeros(len(self.dates), dtype=bool)


def init_lstm(input_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights; gate biases zero except the forget gate at 1."""
    bx, bh = 1.0 / math.sqrt(input_dim), 1.0 / math.sqrt(hidden)
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0
    return {
        "w_x": rng.uniform(-bx, bx, (input_dim, 4 * hidden)).astype(dtype),
        "w_h": rng.uniform(-bh, bh, (hidden, 4 * hidden)).astype(dtype),
        "b": b.astype(dtype),
        "w_out": rng.uniform(-bh, bh, (hidden,)).astype(dtype),
        "b_out": np.zeros(1, dtype=dtype),
    }


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_forward(emb: np.ndarray, params: Params, keep_cache: bool = True):
    """emb[B,W,D] -> (predictions[B,W], cache). Zero initial state; gates ordered i, f, g, o."""
    B, W, D = emb.shape
    H = params["w_h"].shape[0]
    if params["w_x"].shape[0] != D:
        raise ValueError(f"embedding dim {D} does not match LSTM input dim {params['w_x'].shape[0]}")
    zx = emb @ params["w_x"] + params["b"]
    h = np.zeros((B, H), dtype=zx.dtype)
    c = np.zeros((B, H), dtype=zx.dtype)
    hs = np.empty((B, W, H), dtype=zx.dtype)
    steps = []
    for t in range(W):
        z = zx[:, t] + h @ params["w_h"]
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        if keep_cache:
            steps.append((i, f, g, o, c_prev, tc))
    preds = hs @ params["w_out"] + params["b_out"][0]
    return preds, ((emb, hs, steps) if keep_cache else None)


def lstm_backward(cache, d_pred: np.ndarray, params: Params):
    """Backpropagation through time. Returns (param grads, d_emb[B,W,D])."""
    emb, hs, steps = cache
    B, W, D = emb.shape
    H = hs.shape[-1]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["w_out"] = np.einsum("bth,bt->h", hs, d_pred)
    grads["b_out"] = np.array([d_pred.sum()], dtype=params["b_out"].dtype)
    dh_all = d_pred[..., None] * params["w_out"]
    dz_all = np.empty((B, W, 4 * H), dtype=hs.dtype)
    dh_next = np.zeros((B, H), dtype=hs.dtype)
    dc_next = np.zeros((B, H), dtype=hs.dtype)
    for t in reversed(range(W)):
        i, f, g, o, c_prev, tc = steps[t]
        dh = dh_all[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H :] = do * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ params["w_h"].T
        if t > 0:
            grads["w_h"] += hs[:, t - 1].T @ dz
    dzf = dz_all.reshape(-1, 4 * H)
    grads["w_x"] = emb.reshape(-1, D).T @ dzf
    grads["b"] = dzf.sum(0)
    d_emb = dz_all @ params["w_x"].T
    return grads, d_emb


def forward(window: Window, params: Params) -> np.ndarray:
    preds, _ = lstm_forward(np.asarray(window.embeddings)[None], params, keep_cache=False)
    return preds[0]


def backward(window: Window, params: Params, upstream: Sequence[float]):
    _, cache = lstm_forward(np.asarray(window.embeddings)[None], params)
    grads, d_emb = lstm_backward(cache, np.asarray(upstream, dtype=params["w_x"].dtype)[None], params)
    return grads, d_emb[0]
