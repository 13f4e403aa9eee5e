"""Central finite-difference check of the analytic encoder and LSTM gradients.

Runs in float64 on a tiny model so that every parameter entry can be
perturbed. The error for a tensor is the norm-wise relative error
``|g_a - g_n| / max(|g_a| + |g_n|, FLOOR)``. The floor matters for the
attention key bias, whose gradient is zero in exact arithmetic (adding the
same offset to every score leaves the softmax unchanged); there both
norms are round-off, around 1e-11.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .encode import Vocabulary
from .temporal import init_lstm, lstm_backward, lstm_forward
from .train import FreeModel, ModelConfig, WindowData, batch_loss_and_grads

FLOOR = 1e-6
GRADCHECK_MODEL = ModelConfig(dim=8, layers=2, heads=2, ffn=12, max_len=16, hidden=6, window=5)


@dataclass
class GradcheckResult:
    seed: int
    errors: Dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), FLOOR))


def _numeric(f, arr: np.ndarray, eps: float) -> np.ndarray:
    out = np.zeros_like(arr)
    flat, g = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return out


def _tiny_batch(rng: np.random.Generator, vocab_size: int, cfg: ModelConfig) -> List[WindowData]:
    """Two windows of unequal length with ragged token sequences and partial label masks."""
    batch = []
    for b, length in enumerate((cfg.window, cfg.window - 2)):
        tokens = [[2] + rng.integers(3, vocab_size, rng.integers(2, 7)).tolist() for _ in range(length)]
        labels = rng.normal(size=length)
        mask = rng.random(length) < 0.6
        mask[min(1, length - 1)] = True
        dates = [dt.date(2000, 1, 1) + dt.timedelta(days=t) for t in range(length)]
        batch.append(WindowData(f"g{b}", dates, tokens, labels, mask))
    return batch


def check_model(seed: int, cfg: ModelConfig = GRADCHECK_MODEL, eps: float = 1e-5) -> GradcheckResult:
    """Compare training-path gradients (masked MSE through encoder and LSTM) with finite differences."""
    rng = np.random.default_rng([seed, 0x6C])
    vocab = Vocabulary.build([" ".join(f"w{c}" for c in "abcdefghi")])
    model = FreeModel.initialize(cfg, vocab, seed, dtype=np.float64)
    model.target_shift, model.target_scale = 0.3, 1.7
    batch = _tiny_batch(rng, len(vocab), cfg)
    _, grads = batch_loss_and_grads(model, batch)

    def loss():
        return batch_loss_and_grads(model, batch)[0]

    errors = {}
    for group, params in (("encoder", model.encoder), ("lstm", model.lstm)):
        for name, arr in params.items():
            errors[f"{group}.{name}"] = relative_error(grads[f"{group}.{name}"], _numeric(loss, arr, eps))

    # input-embedding gradients of the LSTM on its own
    emb = rng.normal(size=(2, cfg.window, cfg.dim))
    lstm = init_lstm(cfg.dim, cfg.hidden, rng, np.float64)
    weights = rng.normal(size=(2, cfg.window))
    preds, cache = lstm_forward(emb, lstm)
    _, d_emb = lstm_backward(cache, weights, lstm)
    errors["input_embeddings"] = relative_error(
        d_emb, _numeric(lambda: float((lstm_forward(emb, lstm, False)[0] * weights).sum()), emb, eps))
    return GradcheckResult(seed, errors)


def run(seeds: Sequence[int]) -> List[GradcheckResult]:
    return [check_model(s) for s in seeds]
