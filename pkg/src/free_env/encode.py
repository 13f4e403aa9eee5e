"""Tokenizer and a small pre-LN transformer encoder with mean pooling.

Parameters live in a plain ordered ``dict`` of numpy arrays; the insertion
order is the canonical tensor order used by checkpoints. The compute dtype
follows the parameter dtype (float32 for training, float64 for gradient
checks).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

PAD, UNK, BOS = "<pad>", "<unk>", "<bos>"
PAD_ID, UNK_ID, BOS_ID = 0, 1, 2
LN_EPS = 1e-5
_TOKEN_RE = re.compile(r"[a-z]+|\d|[^\sa-z\d]")

Params = Dict[str, np.ndarray]


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:3] != [PAD, UNK, BOS]:
            raise ValueError("vocabulary must start with <pad>, <unk>, <bos>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(split_tokens(text))
        return cls([PAD, UNK, BOS] + sorted(seen - {PAD, UNK, BOS}))

    def to_json(self) -> str:
        return json.dumps(self.ids, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        ids = json.loads(text)
        tokens = [None] * len(ids)
        for tok, i in ids.items():
            tokens[i] = tok
        return cls(tokens)


def split_tokens(text: str) -> List[str]:
    """Lowercase; words, single digits and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary, max_len: int = 256) -> List[int]:
    if not text or not text.strip():
        raise ValueError("cannot tokenize empty text")
    ids = [BOS_ID] + [vocab.ids.get(t, UNK_ID) for t in split_tokens(text)]
    return ids[:max_len]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 128
    max_len: int = 256

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    def to_dict(self):
        return asdict(self)


BLOCK_TENSORS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                 "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def param_shapes(cfg: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    D, F = cfg.dim, cfg.ffn
    shapes = {"tok_emb": (cfg.vocab_size, D), "pos_emb": (cfg.max_len, D)}
    block = {"ln1_g": (D,), "ln1_b": (D,), "wq": (D, D), "bq": (D,), "wk": (D, D), "bk": (D,),
             "wv": (D, D), "bv": (D,), "wo": (D, D), "bo": (D,), "ln2_g": (D,), "ln2_b": (D,),
             "w1": (D, F), "b1": (F,), "w2": (F, D), "b2": (D,)}
    for layer in range(cfg.layers):
        for name in BLOCK_TENSORS:
            shapes[f"blocks.{layer}.{name}"] = block[name]
    return shapes


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    """Uniform(+-1/sqrt(fan_in)) for embeddings and weights, zero biases, unit LN gains."""
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        else:
            fan_in = cfg.dim if leaf.endswith("emb") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    return params


def pad_batch(seqs: Sequence[Sequence[int]], dtype=np.int64) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad token lists; returns (tokens[B,T], mask[B,T])."""
    T = max(len(s) for s in seqs)
    tokens = np.zeros((len(seqs), T), dtype=dtype)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return tokens, mask


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u):
    u2 = u * u
    u2 *= _GELU_C * 0.044715
    u2 += _GELU_C
    t = np.tanh(u * u2)
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _split_heads(x, H):
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _check(tokens: np.ndarray, params: Params, heads: int):
    V, _ = params["tok_emb"].shape
    if tokens.size and (tokens.max() >= V or tokens.min() < 0):
        raise ValueError(f"token id out of range for vocabulary of size {V}")
    if tokens.shape[1] > params["pos_emb"].shape[0]:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {params['pos_emb'].shape[0]}")


def n_layers(params: Params) -> int:
    return sum(1 for k in params if k.endswith(".wq"))


def encoder_forward(tokens: np.ndarray, mask: np.ndarray, params: Params, heads: int, keep_cache: bool = True):
    """Batched forward. Returns (embeddings[B,D], cache or None)."""
    tokens = np.asarray(tokens)
    _check(tokens, params, heads)
    dtype = params["tok_emb"].dtype
    B, T = tokens.shape
    maskf = mask.astype(dtype)
    key_bias = np.where(mask, 0.0, -1e9).astype(dtype)[:, None, None, :]
    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    caches = []
    for layer in range(n_layers(params)):
        p = lambda n: params[f"blocks.{layer}.{n}"]  # noqa: E731
        h, ln1 = _layer_norm(x, p("ln1_g"), p("ln1_b"))
        q = _split_heads(h @ p("wq") + p("bq"), heads)
        k = _split_heads(h @ p("wk") + p("bk"), heads)
        v = _split_heads(h @ p("wv") + p("bv"), heads)
        scale = dtype.type(1.0 / math.sqrt(q.shape[-1]))
        a = q @ k.transpose(0, 1, 3, 2)
        a *= scale
        a += key_bias
        a -= a.max(-1, keepdims=True)
        np.exp(a, out=a)
        a /= a.sum(-1, keepdims=True)
        ctx = _merge_heads(a @ v)
        x = x + ctx @ p("wo") + p("bo")
        h2, ln2 = _layer_norm(x, p("ln2_g"), p("ln2_b"))
        u = h2 @ p("w1") + p("b1")
        z, t = _gelu(u)
        x = x + z @ p("w2") + p("b2")
        if keep_cache:
            caches.append((h, ln1, q, k, v, a, ctx, h2, ln2, u, z, t))
    count = maskf.sum(1, keepdims=True)
    emb = (x * maskf[..., None]).sum(1) / count
    cache = (tokens, maskf, count, caches) if keep_cache else None
    return emb, cache


def encoder_backward(cache, d_emb: np.ndarray, params: Params, heads: int) -> Params:
    """Exact gradients of ``sum(emb * d_emb)`` w.r.t. every parameter tensor."""
    tokens, maskf, count, caches = cache
    B, T = tokens.shape
    grads: Params = {name: np.zeros_like(arr) for name, arr in params.items()}
    dx = maskf[..., None] * (d_emb / count)[:, None, :]
    D = dx.shape[-1]
    for layer in reversed(range(len(caches))):
        h, ln1, q, k, v, a, ctx, h2, ln2, u, z, t = caches[layer]
        pre = f"blocks.{layer}."
        p = lambda n: params[pre + n]  # noqa: E731
        # feed-forward branch
        df = dx.reshape(-1, D)
        grads[pre + "w2"] += z.reshape(-1, z.shape[-1]).T @ df
        grads[pre + "b2"] += df.sum(0)
        du = (dx @ p("w2").T) * _gelu_grad(u, t)
        du2 = du.reshape(-1, du.shape[-1])
        grads[pre + "w1"] += h2.reshape(-1, D).T @ du2
        grads[pre + "b1"] += du2.sum(0)
        dh2 = du @ p("w1").T
        dxn, dg, db = _layer_norm_backward(dh2, p("ln2_g"), ln2)
        grads[pre + "ln2_g"] += dg
        grads[pre + "ln2_b"] += db
        dx = dx + dxn
        # attention branch
        grads[pre + "wo"] += ctx.reshape(-1, D).T @ dx.reshape(-1, D)
        grads[pre + "bo"] += dx.reshape(-1, D).sum(0)
        dctx = _split_heads(dx @ p("wo").T, heads)
        da = dctx @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dctx
        scale = 1.0 / math.sqrt(q.shape[-1])
        ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
        dq = _merge_heads(ds @ k)
        dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q)
        dv = _merge_heads(dv)
        hf = h.reshape(-1, D)
        dh = np.zeros_like(h)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            grads[pre + "w" + name] += hf.T @ dproj.reshape(-1, D)
            grads[pre + "b" + name] += dproj.reshape(-1, D).sum(0)
            dh += dproj @ p("w" + name).T
        dxn, dg, db = _layer_norm_backward(dh, p("ln1_g"), ln1)
        grads[pre + "ln1_g"] += dg
        grads[pre + "ln1_b"] += db
        dx = dx + dxn
    np.add.at(grads["tok_emb"], tokens.ravel(), dx.reshape(-1, D))
    grads["pos_emb"][:T] += dx.sum(0)
    return grads


def encode(tokens: Sequence[int], params: Params, heads: int = 4) -> np.ndarray:
    """Embedding of one token sequence."""
    if len(tokens) == 0:
        raise ValueError("cannot encode an empty token sequence")
    arr, mask = pad_batch([tokens])
    emb, _ = encoder_forward(arr, mask, params, heads, keep_cache=False)
    return emb[0]


def encode_batch(seqs: Sequence[Sequence[int]], params: Params, heads: int = 4, chunk: int = 256) -> np.ndarray:
    """Embeddings of many sequences, length-bucketed to limit padding."""
    if not seqs:
        return np.zeros((0, params["tok_emb"].shape[1]), dtype=params["tok_emb"].dtype)
    order = np.argsort([len(s) for s in seqs], kind="stable")
    out = np.empty((len(seqs), params["tok_emb"].shape[1]), dtype=params["tok_emb"].dtype)
    for start in range(0, len(order), chunk):
        idx = order[start : start + chunk]
        arr, mask = pad_batch([seqs[i] for i in idx])
        out[idx], _ = encoder_forward(arr, mask, params, heads, keep_cache=False)
    return out


def encode_backward(tokens: Sequence[int], params: Params, upstream: np.ndarray, heads: int = 4) -> Params:
    arr, mask = pad_batch([tokens])
    _, cache = encoder_forward(arr, mask, params, heads)
    return encoder_backward(cache, np.asarray(upstream, dtype=params["tok_emb"].dtype)[None, :], params, heads)
