import datetime as dt
import math
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from free_env.checkpoint import (CheckpointError, checkpoint_hash, from_bytes, load_checkpoint, save_checkpoint,
                                 to_bytes)
from free_env.core import split_by_date, subsample_labels
from free_env.encode import Vocabulary
from free_env.estimator import describe_dataset
from free_env.train import (Adam, FreeModel, TrainConfig, TrainingError, WindowData, batch_loss_and_grads,
                            clip_grad_norm, finetune, global_norm, make_windows, masked_mse, predict, pretrain,
                            train_from_scratch)

from conftest import TINY_MODEL

FAST = TrainConfig(phase="pretrain", epochs=3, batch_size=4, lr=3e-3, patience=3, seed=0)


@pytest.fixture(scope="module")
def task(small_benchmark):
    train, test = split_by_date(small_benchmark, dt.date(2007, 1, 28))
    return train, test, describe_dataset(small_benchmark)


@pytest.fixture(scope="module")
def pretrained(task):
    train, _, texts = task
    model, history = pretrain(train, texts, FAST, TINY_MODEL)
    return model, history


def test_masked_mse_examples():
    assert masked_mse([1, 2], [0, 0], [True, False]) == 1.0
    assert masked_mse([3, 4], [3, 4], [True, True]) == 0.0
    assert masked_mse([1, 2, 7], [0, 0, 0], [True, False, False]) == 1.0
    with pytest.raises(ValueError):
        masked_mse([1.0], [0.0], [False])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.booleans()), min_size=1, max_size=40))
def test_masked_mse_oracle(rows):
    p, y, m = map(list, zip(*rows))
    if not any(m):
        return
    expected = sum((a - b) ** 2 for a, b, keep in rows if keep) / sum(m)
    assert masked_mse(p, y, m) == pytest.approx(expected, rel=1e-12, abs=1e-9)


def test_adam_matches_hand_update():
    params = {"w": np.array([1.0, -2.0])}
    g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.3])
    opt = Adam(lr=0.1)
    opt.step(params, {"w": g1.copy()})
    opt.step(params, {"w": g2.copy()})
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2
    # first step moves each coordinate by lr * sign(g) (up to eps)
    w1 = np.array([1.0, -2.0]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    expected = w1 - 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(params["w"], expected, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0.01, 10))
def test_clip_bound(values, threshold):
    grads = {"a": np.array(values), "b": np.array(values[::-1]) * 2}
    before = global_norm(grads)
    returned = clip_grad_norm(grads, threshold)
    assert returned == pytest.approx(before)
    assert global_norm(grads) <= threshold + 1e-9


def test_train_config_validation():
    for bad in (dict(phase="warmup"), dict(epochs=-1), dict(lr=-1.0), dict(val_fraction=0.6)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_unlabeled_tail_does_not_change_gradients():
    vocab = Vocabulary.build(["a b c d e"])
    model = FreeModel.initialize(TINY_MODEL, vocab, 0, dtype=np.float64)
    rng = np.random.default_rng(0)
    days = [dt.date(2000, 1, 1) + dt.timedelta(days=i) for i in range(8)]
    tokens = [[2] + rng.integers(3, 8, 4).tolist() for _ in days]
    labels = rng.normal(size=8)
    mask = np.array([True, False, True, True, False, False, False, False])
    full = WindowData("s", days, tokens, labels, mask)
    short = WindowData("s", days[:4], tokens[:4], labels[:4], mask[:4])
    la, ga = batch_loss_and_grads(model, [full], truncate=False)
    lb, gb = batch_loss_and_grads(model, [short], truncate=False)
    assert la == pytest.approx(lb, abs=1e-14)
    for k in ga:
        np.testing.assert_allclose(ga[k], gb[k], atol=1e-13)


def test_all_unlabeled_batch_is_skipped():
    vocab = Vocabulary.build(["a"])
    model = FreeModel.initialize(TINY_MODEL, vocab, 0)
    w = WindowData("s", [dt.date(2000, 1, 1)], [[2, 3]], np.zeros(1), np.zeros(1, dtype=bool))
    assert batch_loss_and_grads(model, [w]) == (None, None)


def test_make_windows_layout(task):
    train, _, texts = task
    tokens = {k: [2] for k in texts}
    wins = make_windows(train, tokens, "observed", 30)
    assert [len(w.tokens) for w in wins] == [30, 30, 30] * 2
    assert all(w.mask.all() for w in wins)
    assert not any(w.mask.any() for w in make_windows(train, tokens, None, 30))


def test_pretrain_lr_zero_keeps_initialisation(task):
    train, _, texts = task
    cfg = replace(FAST, epochs=1, lr=0.0)
    model, _ = pretrain(train, texts, cfg, TINY_MODEL)
    init = FreeModel.initialize(TINY_MODEL, model.vocab, cfg.seed)
    for (n1, a), (n2, b) in zip(model.tensors(), init.tensors()):
        assert n1 == n2 and np.array_equal(a, b)


def test_pretrain_requires_simulated_labels(task):
    train, _, texts = task
    with pytest.raises(TrainingError):
        pretrain(train.map(lambda s: replace(s, simulated_label=None)), texts, FAST, TINY_MODEL)


def test_pretrain_is_deterministic(task, pretrained):
    train, _, texts = task
    again, _ = pretrain(train, texts, FAST, TINY_MODEL)
    assert to_bytes(again) == to_bytes(pretrained[0])


def test_training_curve_improves(task):
    train, _, texts = task
    cfg = replace(FAST, epochs=30, patience=30, val_fraction=0.0)
    _, history = pretrain(train, texts, cfg, TINY_MODEL)
    losses = [h["train_loss"] for h in history]
    assert min(losses[1:]) < losses[0]
    assert set(history[0]) == {"epoch", "phase", "train_loss", "val_rmse", "lr", "wall_s"}


def test_finetune_zero_epochs_returns_start(task, pretrained):
    train, _, texts = task
    start = pretrained[0]
    out, history = finetune(start, train, texts, TrainConfig(phase="finetune", epochs=0))
    assert history == []
    assert [a.tobytes() for _, a in out.tensors()] == [a.tobytes() for _, a in start.tensors()]
    assert out.provenance[:-1] == start.provenance
    assert out.provenance[-1]["start_hash"] == checkpoint_hash(start)


def test_finetune_freeze_encoder(task, pretrained):
    train, _, texts = task
    cfg = TrainConfig(phase="finetune", epochs=2, lr=1e-3, freeze_encoder=True)
    out, _ = finetune(pretrained[0], train, texts, cfg)
    assert all(np.array_equal(out.encoder[k], pretrained[0].encoder[k]) for k in out.encoder)
    assert not all(np.array_equal(out.lstm[k], pretrained[0].lstm[k]) for k in out.lstm)


def test_finetune_errors(task, pretrained):
    train, _, texts = task
    with pytest.raises(TrainingError, match="at least one observed"):
        finetune(pretrained[0], train.map(lambda s: replace(s, observed_label=None)), texts)
    with pytest.raises(TrainingError, match="architecture mismatch"):
        finetune(pretrained[0], train, texts, expected_config=replace(TINY_MODEL, hidden=16))


@pytest.mark.slow
def test_finetune_full_labels_not_worse_than_pretrained(default_harness):
    h = default_harness
    texts = h.texts(h.data)
    start = h.pretrained(h.train, texts, seed=1)
    tuned = h.tune(start, h.train, texts, seed=1)
    assert h.score(tuned, h.test, texts) <= h.score(start, h.test, texts)


def test_train_from_scratch_on_sparse_labels(task):
    train, test, texts = task
    sparse = subsample_labels(train, 0.1, 0)
    model, history = train_from_scratch(sparse, texts, replace(FAST, phase="finetune"), TINY_MODEL)
    preds = predict(model, test, texts)
    assert len(preds) == len(test) and all(math.isfinite(v) for v in preds.values())
    assert model.provenance[0]["phase"] == "scratch"


# --- checkpoint format ---------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, pretrained):
    model = pretrained[0]
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    h1 = save_checkpoint(model, p1)
    h2 = save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes() and h1 == h2 == checkpoint_hash(model)
    again = load_checkpoint(p1)
    assert again.vocab == model.vocab and again.config == model.config
    assert again.target_shift == model.target_shift and again.provenance == model.provenance


def test_checkpoint_header(pretrained):
    data = to_bytes(pretrained[0])
    magic, version, meta_len = struct.unpack_from("<4sIQ", data)
    assert magic == b"FREE" and version == 1
    assert data[16:16 + meta_len].startswith(b"{")


def test_checkpoint_errors(pretrained):
    data = to_bytes(pretrained[0])
    with pytest.raises(CheckpointError, match="bad magic"):
        from_bytes(b"FREX" + data[4:])
    with pytest.raises(CheckpointError, match=r"unsupported version 999 \(supported: 1\)"):
        from_bytes(data[:4] + struct.pack("<I", 999) + data[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(data[:10])
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(data + b"\0\0\0\0")
