"""Teacher-forced training with AdamW, gradient clipping, early stopping and multi-seed runs."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, TrainingError
from .imaging import AugmentConfig, ImageBuffer, augment, preprocess_image, read_pnm
from .metrics import aggregate
from .tensor import Rng
from .tokenizer import Vocab, tokenize

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 3
    seeds: tuple = (42, 43, 44)
    clip_norm: float = 1.0
    max_len: int = 128
    augment: bool = True

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(lr=1e-5)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.patience > self.epochs:
            raise ConfigError(f"patience {self.patience} exceeds epochs {self.epochs}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be positive")


# -- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.01,
               betas=(0.9, 0.999), eps: float = 1e-8):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` is a list of ``(name, Parameter)``; ``grads`` the matching arrays.
    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta.
    """
    b1, b2 = betas
    for (name, p), g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        t = state.step.get(name, 0) + 1
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps) - lr * weight_decay * p.data
        state.m[name], state.v[name], state.step[name] = m, v, t


def clip_global_norm(grads, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return total


class AdamW:
    def __init__(self, model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.state = AdamState()

    def step(self):
        params = self.model.trainable()
        grads = [p.grad for _, p in params]
        clip_global_norm(grads, self.cfg.clip_norm)
        adamw_step(params, grads, self.state, self.cfg.lr, self.cfg.weight_decay, self.cfg.betas, self.cfg.eps)
        self.model.zero_grad()


# -- data ------------------------------------------------------------------

@dataclass
class CaptionSample:
    image: ImageBuffer
    tokens: np.ndarray
    length: int
    caption: str
    article_id: str = ""
    modality: str = "OTHER"
    id: str = ""


def make_samples(entries, vocab: Vocab, max_len: int = 128) -> list:
    samples = []
    for e in entries:
        ids, n = tokenize(e.caption, vocab, max_len)
        samples.append(CaptionSample(read_pnm(e.image_path), ids, n, e.caption, e.article_id, e.modality, e.id))
    return samples


def collate(samples, image_size: int, rng: Rng | None = None, augment_cfg: AugmentConfig | None = None):
    """Stack images [B, 3, S, S] and tokens trimmed to the longest sequence in the batch."""
    imgs = []
    for s in samples:
        img = augment(s.image, rng, augment_cfg) if rng is not None else s.image
        imgs.append(preprocess_image(img, image_size))
    width = max(s.length for s in samples)
    tokens = np.stack([s.tokens[:width] for s in samples])
    return np.stack(imgs), tokens


def iterate_batches(samples, batch_size: int, order=None):
    order = np.arange(len(samples)) if order is None else order
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


# -- steps and loops -------------------------------------------------------

def train_step(batch, model, optimizer: AdamW, rng: Rng | None = None) -> float:
    """Forward, masked cross-entropy, backward, AdamW. ``batch`` is (images, tokens)."""
    images, tokens = batch
    model.train()
    loss = model.loss(images, tokens, rng)
    if not np.isfinite(loss.item()):
        raise TrainingError(f"non-finite loss {loss.item()}")
    T.backward(loss)
    optimizer.step()
    return loss.item()


def evaluate_loss(model, samples, image_size: int, batch_size: int = 8) -> float:
    """Token-weighted mean NLL over a split, eval mode, no augmentation."""
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for chunk in iterate_batches(samples, batch_size):
            images, tokens = collate(chunk, image_size)
            n = int(np.sum(tokens[:, 1:] != model.cfg.pad_id))
            total += model.loss(images, tokens).item() * n
            count += n
    model.train()
    return total / max(count, 1)


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class RunRecord:
    seed: int
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float = math.inf
    stopped_early: bool = False
    stream_hash: str = ""
    best_checkpoint: str = ""
    best_state: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "stream_hash": self.stream_hash,
            "best_checkpoint": self.best_checkpoint,
        }


class JsonlLogger:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, epoch: int, split: str, loss: float, seed: int):
        row = {"epoch": epoch, "split": split, "loss": loss, "seed": seed, "timestamp": time.time()}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row) + "\n")


def train_loop(model, train_samples, val_samples, cfg: TrainConfig, seed: int, image_size: int,
               augment_cfg: AugmentConfig | None = None, logger=None, on_epoch_end=None,
               unfreeze_after: int = -1) -> RunRecord:
    """Epochs of shuffled teacher-forced steps with validation-loss early stopping.

    Every random draw (order, augmentation, dropout) comes from streams keyed
    by ``seed``. The model finishes holding its best-validation weights.
    """
    if not train_samples or not val_samples:
        raise DataError("training and validation splits must both be non-empty")
    root = Rng(seed)
    data_rng, drop_rng = root.child("data"), root.child("dropout")
    augment_cfg = augment_cfg if cfg.augment else None
    optimizer = AdamW(model, cfg)
    stopper = EarlyStopping(cfg.patience)
    record = RunRecord(seed)
    stream = hashlib.sha256()

    for epoch in range(1, cfg.epochs + 1):
        if unfreeze_after >= 0 and epoch == unfreeze_after + 1:
            model.decoder.embedding.frozen = False
        order = data_rng.permutation(len(train_samples))
        losses = []
        for chunk in iterate_batches(train_samples, cfg.batch_size, order):
            images, tokens = collate(chunk, image_size, data_rng if augment_cfg else None, augment_cfg)
            stream.update(images.tobytes())
            stream.update(tokens.tobytes())
            losses.append(train_step((images, tokens), model, optimizer, drop_rng))
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, val_samples, image_size, cfg.batch_size)
        record.train_losses.append(train_loss)
        record.val_losses.append(val_loss)
        if logger:
            logger(epoch, "train", train_loss, seed)
            logger(epoch, "val", val_loss, seed)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            record.best_state = model.state_dict()
        if on_epoch_end:
            on_epoch_end(epoch, model, record)
        log.info("seed %d epoch %d train %.4f val %.4f", seed, epoch, train_loss, val_loss)
        if stop:
            record.stopped_early = epoch < cfg.epochs
            break

    record.best_epoch, record.best_val_loss = stopper.best_epoch, stopper.best
    record.stream_hash = stream.hexdigest()
    model.load_state_dict(record.best_state)
    model.eval()
    return record


def run_seeds(model_factory, train_samples, val_samples, cfg: TrainConfig, image_size: int, **kwargs):
    """Train one fresh model per seed; aggregate best validation losses (mean, std, 95% CI)."""
    records, models = [], []
    for seed in cfg.seeds:
        model = model_factory(seed)
        records.append(train_loop(model, train_samples, val_samples, cfg, seed, image_size, **kwargs))
        models.append(model)
    summary = aggregate([r.best_val_loss for r in records])
    return records, models, summary
