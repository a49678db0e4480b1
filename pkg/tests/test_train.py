import json
import math

import numpy as np
import pytest

from regcap import tensor as T
from regcap.data import load_manifest
from regcap.errors import ConfigError, DataError, TrainingError
from regcap.imaging import AugmentConfig
from regcap.tensor import Parameter, Rng
from regcap.tokenizer import Vocab
from regcap.train import (
    AdamState, AdamW, EarlyStopping, JsonlLogger, TrainConfig, adamw_step, clip_global_norm, collate,
    make_samples, run_seeds, train_loop, train_step,
)

from conftest import toy_batch, toy_model


def corpus_samples(root, max_len=32):
    vocab = Vocab.load(root / "vocab.txt")
    entries = load_manifest(root / "manifest.jsonl").entries
    split = lambda s: make_samples([e for e in entries if e.split == s], vocab, max_len)
    return vocab, split("train"), split("val")


def test_first_adamw_step():
    p = Parameter(np.array([1.0]))
    adamw_step([("p", p)], [np.array([1.0])], AdamState(), lr=0.1, weight_decay=0.01)
    assert p.data[0] == pytest.approx(0.899, abs=1e-6)


def test_zero_grad_no_decay_leaves_param():
    p = Parameter(np.array([2.5, -1.0]))
    adamw_step([("p", p)], [np.zeros(2)], AdamState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [2.5, -1.0])


def test_non_finite_gradient_names_parameter():
    p = Parameter(np.ones(2))
    with pytest.raises(TrainingError, match="decoder.w"):
        adamw_step([("decoder.w", p)], [np.array([np.nan, 0.0])], AdamState(), lr=0.1)


def test_global_norm_clipping():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_global_norm(g, 1.0) == 5.0
    assert math.hypot(g[0][0], g[1][0]) == pytest.approx(1.0)
    h = [np.array([0.3])]
    clip_global_norm(h, 1.0)
    assert h[0][0] == 0.3


def test_config_guards():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=2, patience=3)
    with pytest.raises(ConfigError):
        TrainConfig(seeds=())
    assert TrainConfig.full_scale().lr == 1e-5


def test_early_stopping_trace():
    es = EarlyStopping(3)
    stops = [es.update(e, v) for e, v in enumerate([3, 2, 2.1, 2.2, 2.3], start=1)]
    assert stops == [False, False, False, False, True]
    assert (es.best_epoch, es.best) == (2, 2)
    es = EarlyStopping(3)
    assert not any(es.update(e, 10 - e) for e in range(1, 8))


def test_identical_samples_same_loss_as_single():
    m = toy_model()
    m.eval()
    imgs, toks = toy_batch(batch=1)
    one = m.loss(imgs, toks).item()
    many = m.loss(np.repeat(imgs, 3, 0), np.repeat(toks, 3, 0)).item()
    assert many == pytest.approx(one, abs=1e-12)


def test_overfit_single_batch():
    m = toy_model()
    opt = AdamW(m, TrainConfig(lr=1e-3))
    batch = toy_batch(batch=2, length=6)
    drop = Rng(0)
    losses = [train_step(batch, m, opt, drop) for _ in range(50)]
    ups = sum(b > a for a, b in zip(losses, losses[1:]))
    assert ups <= 2 and losses[-1] < 0.5 * losses[0]


def test_collate_trims_to_longest(small_corpus):
    _, train, _ = corpus_samples(small_corpus)
    imgs, toks = collate(train[:3], 32)
    assert imgs.shape == (3, 3, 32, 32)
    assert toks.shape[1] == max(s.length for s in train[:3])


def test_train_loop_records_and_restores_best(small_corpus, tmp_path):
    vocab, train, val = corpus_samples(small_corpus)
    cfg = TrainConfig(epochs=3, patience=1, batch_size=8, seeds=(42,))
    seen = []
    m = toy_model(vocab_size=len(vocab))
    rec = train_loop(m, train, val, cfg, 42, 32, AugmentConfig(), JsonlLogger(tmp_path / "log.jsonl"),
                     on_epoch_end=lambda e, *_: seen.append(e))
    assert seen == list(range(1, len(rec.val_losses) + 1))
    assert rec.best_val_loss == min(rec.val_losses)
    assert rec.best_epoch == int(np.argmin(rec.val_losses)) + 1
    for n, p in m.named_parameters():
        np.testing.assert_array_equal(p.data, rec.best_state[n])
    rows = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert {r["split"] for r in rows} == {"train", "val"} and len(rows) == 2 * len(rec.val_losses)
    assert len(rec.stream_hash) == 64


def test_train_loop_is_deterministic(small_corpus):
    vocab, train, val = corpus_samples(small_corpus)
    cfg = TrainConfig(epochs=1, patience=1, seeds=(7,))
    runs = [train_loop(toy_model(vocab_size=len(vocab)), train, val, cfg, 7, 32, AugmentConfig()) for _ in range(2)]
    assert runs[0].train_losses == runs[1].train_losses
    assert runs[0].stream_hash == runs[1].stream_hash


def test_empty_split_is_data_error(small_corpus):
    vocab, train, _ = corpus_samples(small_corpus)
    with pytest.raises(DataError):
        train_loop(toy_model(vocab_size=len(vocab)), train, [], TrainConfig(epochs=1, patience=1), 1, 32)


def test_unfreeze_after(small_corpus):
    vocab, train, val = corpus_samples(small_corpus)
    m = toy_model(vocab_size=len(vocab))
    before = m.decoder.embedding.matrix.data.copy()
    train_loop(m, train, val, TrainConfig(epochs=2, patience=2, augment=False), 1, 32, unfreeze_after=1)
    assert not m.decoder.embedding.frozen
    assert not np.array_equal(before, m.decoder.embedding.matrix.data)


def test_run_seeds_aggregate(small_corpus):
    vocab, train, val = corpus_samples(small_corpus)
    cfg = TrainConfig(epochs=1, patience=1, seeds=(1, 2), augment=False)
    recs, models, agg = run_seeds(lambda s: toy_model(seed=s, vocab_size=len(vocab)), train, val, cfg, 32)
    assert [r.seed for r in recs] == [1, 2] and len(models) == 2
    assert agg["n"] == 2 and agg["mean"] == pytest.approx(np.mean([r.best_val_loss for r in recs]))
