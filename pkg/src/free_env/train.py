"""Model container, masked loss, Adam, and the pretrain / fine-tune loops."""
from __future__ import annotations

import copy
import datetime as dt
import hashlib
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import Dataset
from .encode import EncoderConfig, Params, Vocabulary, encoder_backward, encoder_forward, init_encoder, pad_batch, tokenize
from .temporal import init_lstm, lstm_backward, lstm_forward

log = logging.getLogger(__name__)

Key = Tuple[str, dt.date]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 128
    max_len: int = 256
    hidden: int = 64
    window: int = 30

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size, self.dim, self.layers, self.heads, self.ffn, self.max_len)


# small architecture used by the experiment harness on one CPU core
DESK_MODEL = ModelConfig(dim=32, layers=1, heads=2, ffn=64, max_len=256, hidden=32, window=30)


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    freeze_encoder: bool = False
    window_fraction: float = 1.0

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not (0.0 <= self.val_fraction <= 0.5):
            raise ValueError("val_fraction must lie in [0, 0.5]")
        if not (0.0 < self.window_fraction <= 1.0):
            raise ValueError("window_fraction must lie in (0, 1]")


PRETRAIN = TrainConfig()
FINETUNE = TrainConfig(phase="finetune", lr=1e-4)


@dataclass
class FreeModel:
    """Trainable state: encoder + LSTM + head, with architecture and provenance metadata."""

    config: ModelConfig
    vocab: Vocabulary
    encoder: Params
    lstm: Params
    target_shift: float = 0.0
    target_scale: float = 1.0
    provenance: List[dict] = field(default_factory=list)

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocabulary, seed: int, dtype=np.float32) -> "FreeModel":
        rng = np.random.default_rng([seed, 0x5EED])
        enc = init_encoder(config.encoder_config(len(vocab)), rng, dtype)
        lstm = init_lstm(config.dim, config.hidden, rng, dtype)
        return cls(config, vocab, enc, lstm)

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        """All tensors in canonical order."""
        return [("encoder." + k, v) for k, v in self.encoder.items()] + [("lstm." + k, v) for k, v in self.lstm.items()]

    def copy(self) -> "FreeModel":
        return FreeModel(self.config, self.vocab, {k: v.copy() for k, v in self.encoder.items()},
                         {k: v.copy() for k, v in self.lstm.items()}, self.target_shift, self.target_scale,
                         copy.deepcopy(self.provenance))

    def same_architecture(self, other: "FreeModel") -> bool:
        return self.config == other.config and self.vocab == other.vocab

    def tokenize(self, text: str) -> List[int]:
        return tokenize(text, self.vocab, self.config.max_len)

    def embed(self, token_lists: Sequence[Sequence[int]], chunk: int = 256) -> np.ndarray:
        from .encode import encode_batch
        return encode_batch(token_lists, self.encoder, self.config.heads, chunk)


def masked_mse(predictions, labels, mask) -> float:
    """Mean of squared errors over masked steps; works on single windows or batches."""
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("masked_mse needs at least one masked step")
    d = np.where(m, p - np.where(m, y, 0.0), 0.0)
    return float((d * d).sum() / n)


class Adam:
    """Adaptive moment estimation without weight decay."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale in place so the global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm


@dataclass
class WindowData:
    """Token ids, labels and mask for one window of consecutive days of one site."""

    site_id: str
    dates: List[dt.date]
    tokens: List[List[int]]
    labels: np.ndarray
    mask: np.ndarray

    @property
    def n_labels(self) -> int:
        return int(self.mask.sum())


def make_windows(ds: Dataset, tokens: Mapping[Key, List[int]], label: Optional[str], window: int) -> List[WindowData]:
    """Chop each site into consecutive windows of ``window`` days (stride ``window``)."""
    attr = {"simulated": "simulated_label", "observed": "observed_label", None: None}[label]
    out = []
    for site in ds.sites:
        series = ds.site_samples(site)
        for start in range(0, len(series), window):
            chunk = series[start : start + window]
            labels = np.zeros(len(chunk))
            mask = np.zeros(len(chunk), dtype=bool)
            if attr is not None:
                for t, s in enumerate(chunk):
                    v = getattr(s, attr)
                    if v is not None:
                        labels[t], mask[t] = v, True
            out.append(WindowData(site, [s.date for s in chunk], [tokens[s.key] for s in chunk], labels, mask))
    return out


def _batch_forward(model: FreeModel, batch: Sequence[WindowData], truncate: bool, keep_cache: bool):
    """Encode and run the LSTM on a batch; windows are right-padded with masked steps."""
    lengths = []
    for w in batch:
        n = len(w.tokens)
        if truncate and w.mask.any():
            n = int(np.nonzero(w.mask)[0][-1]) + 1
        lengths.append(n)
    L = max(lengths)
    seqs = [t for w, n in zip(batch, lengths) for t in w.tokens[:n]]
    tok, tmask = pad_batch(seqs)
    emb_flat, enc_cache = encoder_forward(tok, tmask, model.encoder, model.config.heads, keep_cache)
    dtype = emb_flat.dtype
    emb = np.zeros((len(batch), L, emb_flat.shape[1]), dtype=dtype)
    labels = np.zeros((len(batch), L))
    mask = np.zeros((len(batch), L), dtype=bool)
    pos = 0
    for b, (w, n) in enumerate(zip(batch, lengths)):
        emb[b, :n] = emb_flat[pos : pos + n]
        labels[b, :n] = w.labels[:n]
        mask[b, :n] = w.mask[:n]
        pos += n
    preds, lstm_cache = lstm_forward(emb, model.lstm, keep_cache)
    return preds, labels, mask, lengths, enc_cache, lstm_cache


def batch_loss_and_grads(model: FreeModel, batch: Sequence[WindowData], freeze_encoder: bool = False,
                         truncate: bool = True):
    """Masked MSE (normalized units) of a batch and its exact gradients."""
    preds, labels, mask, lengths, enc_cache, lstm_cache = _batch_forward(model, batch, truncate, True)
    n = int(mask.sum())
    if n == 0:
        return None, None
    y = (labels - model.target_shift) / model.target_scale
    diff = np.where(mask, preds - y, 0.0)
    loss = float((diff * diff).sum() / n)
    d_pred = (2.0 * diff / n).astype(preds.dtype)
    g_lstm, d_emb = lstm_backward(lstm_cache, d_pred, model.lstm)
    grads = {"lstm." + k: v for k, v in g_lstm.items()}
    if not freeze_encoder:
        d_flat = np.concatenate([d_emb[b, :n_] for b, n_ in enumerate(lengths)])
        g_enc = encoder_backward(enc_cache, d_flat, model.encoder, model.config.heads)
        grads.update({"encoder." + k: v for k, v in g_enc.items()})
    return loss, grads


def predict_windows(model: FreeModel, windows: Sequence[WindowData], batch_size: int = 16) -> List[np.ndarray]:
    """Predictions in original target units, one array per window."""
    out = []
    for start in range(0, len(windows), batch_size):
        batch = windows[start : start + batch_size]
        preds, *_ = _batch_forward(model, batch, truncate=False, keep_cache=False)
        for b, w in enumerate(batch):
            out.append(preds[b, : len(w.tokens)].astype(float) * model.target_scale + model.target_shift)
    return out


def windows_rmse(model: FreeModel, windows: Sequence[WindowData]) -> float:
    preds = predict_windows(model, windows)
    p = np.concatenate(preds)
    y = np.concatenate([w.labels for w in windows])
    m = np.concatenate([w.mask for w in windows])
    return math.sqrt(masked_mse(p, y, m))


def _named_params(model: FreeModel) -> Dict[str, np.ndarray]:
    named = {"lstm." + k: v for k, v in model.lstm.items()}
    named.update({"encoder." + k: v for k, v in model.encoder.items()})
    return named


def fit(model: FreeModel, windows: Sequence[WindowData], cfg: TrainConfig,
        log_fn: Optional[Callable[[dict], None]] = None) -> Tuple[FreeModel, List[dict]]:
    """Train in place from ``model``; returns the best-validation copy and the epoch log."""
    rng = np.random.default_rng([cfg.seed, 0x7A11])
    windows = [w for w in windows if w.n_labels > 0]
    if not windows:
        raise TrainingError("no labeled windows to train on")
    if cfg.window_fraction < 1.0:
        keep = max(1, int(round(cfg.window_fraction * len(windows))))
        windows = [windows[i] for i in sorted(rng.choice(len(windows), keep, replace=False))]
    order = rng.permutation(len(windows))
    n_val = int(round(cfg.val_fraction * len(windows)))
    if n_val >= len(windows):
        n_val = len(windows) - 1
    val = [windows[i] for i in sorted(order[:n_val])]
    train = [windows[i] for i in sorted(order[n_val:])]
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    named = _named_params(model)
    best, best_score, stale = model.copy(), math.inf, 0
    history: List[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [train[i] for i in perm[start : start + cfg.batch_size]]
            loss, grads = batch_loss_and_grads(model, batch, cfg.freeze_encoder)
            if loss is None:
                warnings.warn("batch without labeled steps skipped")
                continue
            clip_grad_norm(grads, cfg.clip_norm)
            opt.step(named, grads)
            nb = sum(w.n_labels for w in batch)
            total += loss * nb
            count += nb
        train_loss = total / max(count, 1)
        val_rmse = windows_rmse(model, val) if val else float("nan")
        score = val_rmse if val else train_loss
        rec = {"epoch": epoch, "phase": cfg.phase, "train_loss": train_loss, "val_rmse": val_rmse,
               "lr": cfg.lr, "wall_s": round(time.perf_counter() - t0, 3)}
        history.append(rec)
        if log_fn is not None:
            log_fn(rec)
        log.info("%s epoch %d train_loss=%.4f val_rmse=%.4f", cfg.phase, epoch, train_loss, val_rmse)
        if score < best_score:
            best, best_score, stale = model.copy(), score, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if cfg.epochs == 0:
        best = model.copy()
    return best, history


def descriptions_hash(texts: Mapping[Key, str]) -> str:
    h = hashlib.sha256()
    for key in sorted(texts):
        h.update(f"{key[0]}|{key[1].isoformat()}|{texts[key]}\n".encode("utf-8"))
    return h.hexdigest()


def _tokens(model: FreeModel, texts: Mapping[Key, str]) -> Dict[Key, List[int]]:
    return {k: model.tokenize(t) for k, t in texts.items()}


def pretrain(data: Dataset, descriptions: Mapping[Key, str], cfg: TrainConfig = PRETRAIN,
             model_config: ModelConfig = ModelConfig(), vocab: Optional[Vocabulary] = None,
             log_fn=None) -> Tuple[FreeModel, List[dict]]:
    """Train encoder + LSTM on simulated labels from a fresh initialization."""
    sims = np.array([s.simulated_label for s in data if s.simulated_label is not None])
    if sims.size == 0:
        raise TrainingError("pretraining requires simulated labels")
    vocab = vocab or Vocabulary.build(descriptions[s.key] for s in data)
    model = FreeModel.initialize(model_config, vocab, cfg.seed)
    model.target_shift = float(sims.mean())
    model.target_scale = float(sims.std()) or 1.0
    windows = make_windows(data, _tokens(model, descriptions), "simulated", model_config.window)
    best, history = fit(model, windows, cfg, log_fn)
    best.provenance = [{"phase": "pretrain", "seed": cfg.seed, "epochs_run": len(history),
                        "config": asdict(cfg), "data_hash": data.content_hash(),
                        "descriptions_hash": descriptions_hash({s.key: descriptions[s.key] for s in data})}]
    return best, history


def train_from_scratch(data: Dataset, descriptions: Mapping[Key, str], cfg: TrainConfig,
                       model_config: ModelConfig = ModelConfig(), vocab: Optional[Vocabulary] = None,
                       log_fn=None) -> Tuple[FreeModel, List[dict]]:
    """Fit directly on observed labels with no pretraining (the no-pretraining comparison arm)."""
    obs = np.array([s.observed_label for s in data if s.observed_label is not None])
    if obs.size == 0:
        raise TrainingError("training requires at least one observed label")
    vocab = vocab or Vocabulary.build(descriptions[s.key] for s in data)
    model = FreeModel.initialize(model_config, vocab, cfg.seed)
    model.target_shift = float(obs.mean())
    model.target_scale = float(obs.std()) if obs.size > 1 and obs.std() > 0 else 1.0
    windows = make_windows(data, _tokens(model, descriptions), "observed", model_config.window)
    best, history = fit(model, windows, cfg, log_fn)
    best.provenance = [{"phase": "scratch", "seed": cfg.seed, "epochs_run": len(history), "config": asdict(cfg),
                        "data_hash": data.content_hash()}]
    return best, history


def finetune(start: FreeModel, data: Dataset, descriptions: Mapping[Key, str], cfg: TrainConfig = FINETUNE,
             log_fn=None, expected_config: Optional[ModelConfig] = None) -> Tuple[FreeModel, List[dict]]:
    """Continue training ``start`` on observed labels with a fresh optimizer."""
    from .checkpoint import checkpoint_hash

    if expected_config is not None and expected_config != start.config:
        raise TrainingError(f"architecture mismatch: checkpoint {start.config} vs requested {expected_config}")
    if data.n_observed() == 0:
        raise TrainingError("fine-tuning requires at least one observed label")
    model = start.copy()
    start_hash = checkpoint_hash(start)
    if cfg.epochs == 0:
        history: List[dict] = []
        best = model
    else:
        windows = make_windows(data, _tokens(model, descriptions), "observed", model.config.window)
        best, history = fit(model, windows, cfg, log_fn)
    best.provenance = start.provenance + [{"phase": "finetune", "seed": cfg.seed, "epochs_run": len(history),
                                           "config": asdict(cfg), "start_hash": start_hash,
                                           "data_hash": data.content_hash()}]
    return best, history


def predict(model: FreeModel, data: Dataset, descriptions: Mapping[Key, str]) -> Dict[Key, float]:
    """Windowed inference (stride = window length, zero initial state)."""
    windows = make_windows(data, _tokens(model, descriptions), None, model.config.window)
    preds = predict_windows(model, windows)
    out = {}
    for w, p in zip(windows, preds):
        for d, v in zip(w.dates, p):
            out[(w.site_id, d)] = float(v)
    return out
