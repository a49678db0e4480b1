"""Synthetic "radiology" corpus: one geometric finding per image, templated captions.

Each image is a grey-scale scan whose background texture encodes the
modality; a single shape (the finding) sits in one quadrant. Captions name
modality, size, shape and position, e.g.
``"ct scan showing a large circle in the upper left region"``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import ManifestEntry, write_manifest
from .imaging import ImageBuffer, write_pnm
from .tensor import Rng
from .tokenizer import Vocab, build_vocab

SHAPES = ("circle", "square", "triangle", "cross")
POSITIONS = ("upper left", "upper right", "lower left", "lower right")
SIZES = ("small", "large")
RADIUS = {"small": 0.15, "large": 0.24}  # fraction of image side
JITTER = 0.0  # centre jitter, fraction of image side
MODALITY_WEIGHTS = {"CT": 0.4, "MRI": 0.3, "XRAY": 0.3}
_MODALITY_WORD = {"CT": "ct", "MRI": "mri", "XRAY": "xray"}


def shape_mask(shape: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "square":
        return (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    if shape == "triangle":
        return (dy <= radius * 0.8) & (dy >= -radius) & (np.abs(dx) <= (dy + radius) * 0.6)
    if shape == "cross":
        arm = radius * 0.35
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    raise ValueError(f"unknown shape {shape!r}")


def background(modality: str, size: int, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    if modality == "CT":
        body = ((yy - 0.5) ** 2 + (xx - 0.5) ** 2) <= 0.22
        img = np.where(body, 110.0, 20.0)
    elif modality == "MRI":
        img = 40.0 + 40.0 * np.sin(6 * np.pi * xx) ** 2
    else:
        img = 170.0 - 90.0 * yy
    return img + rng.normal(0.0, 8.0, (size, size))


def render(shape: str, position: str, size_word: str, modality: str, rng: Rng, size: int = 32) -> ImageBuffer:
    img = background(modality, size, rng)
    row, col = position.split()
    half = size / 2
    radius = size * RADIUS[size_word]
    jitter = size * JITTER
    cy = (half / 2 if row == "upper" else half * 1.5) + rng.uniform(-jitter, jitter)
    cx = (half / 2 if col == "left" else half * 1.5) + rng.uniform(-jitter, jitter)
    fg = 235.0 if modality != "XRAY" else 15.0
    img = np.where(shape_mask(shape, size, cy, cx, radius), fg, img)
    return ImageBuffer(np.clip(np.round(img), 0, 255))


def caption_for(modality: str, shape: str, position: str, size_word: str) -> str:
    return f"{_MODALITY_WORD[modality]} scan showing a {size_word} {shape} in the {position} region"


def sample_item(rng: Rng, size: int = 32, modality: str | None = None):
    if modality is None:
        mods = list(MODALITY_WEIGHTS)
        modality = mods[int(rng.choice(len(mods), p=list(MODALITY_WEIGHTS.values())))]
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    position = POSITIONS[int(rng.integers(len(POSITIONS)))]
    size_word = SIZES[int(rng.integers(len(SIZES)))]
    img = render(shape, position, size_word, modality, rng, size)
    meta = {"shape": shape, "position": position, "size": size_word, "modality": modality}
    return img, caption_for(modality, shape, position, size_word), meta


def _modality_plan(n: int, rng: Rng) -> list:
    """Exact 40/30/30 allocation (rounded), shuffled."""
    counts = {m: int(round(w * n)) for m, w in MODALITY_WEIGHTS.items()}
    counts["CT"] += n - sum(counts.values())
    plan = [m for m, c in counts.items() for _ in range(c)]
    return [plan[i] for i in rng.permutation(n)]


def synthetic_manifest(n_articles: int, seed: int = 42, images_per_article=(1, 3)) -> list:
    """Manifest entries only (no pixels) for split and leakage checks."""
    rng = Rng(seed).child("manifest")
    entries = []
    sizes = rng.integers(images_per_article[0], images_per_article[1] + 1, n_articles)
    mods = _modality_plan(n_articles, rng)
    for a, (k, mod) in enumerate(zip(sizes, mods)):
        for i in range(int(k)):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            pos = POSITIONS[int(rng.integers(len(POSITIONS)))]
            entries.append(ManifestEntry(
                image_path=f"images/PMC{a:06d}_{i}.pgm",
                caption=caption_for(mod, shape, pos, "small"),
                article_id=f"PMC{a:06d}",
                modality=mod,
                id=f"PMC{a:06d}_{i}",
            ))
    return entries


def generate_dataset(out_dir, n_train: int = 200, n_val: int = 50, n_test: int = 50, seed: int = 42,
                     size: int = 32, images_per_article: int = 2) -> dict:
    """Write images, ``manifest.jsonl`` and ``vocab.txt`` under ``out_dir``.

    Articles hold ``images_per_article`` images of one modality and are
    assigned wholesale to a split, so the split counts are exact multiples.
    """
    out_dir = Path(out_dir)
    rng = Rng(seed).child("synthetic")
    entries = []
    art = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        n_articles = -(-n // images_per_article)
        mods = _modality_plan(n_articles, rng)
        made = 0
        for mod in mods:
            for i in range(images_per_article):
                if made == n:
                    break
                img, caption, meta = sample_item(rng, size, mod)
                rel = f"images/{split}_{art:05d}_{i}.pgm"
                write_pnm(out_dir / rel, img)
                entries.append(ManifestEntry(rel, caption, f"ART{art:05d}", mod, split, f"{split}_{art:05d}_{i}"))
                made += 1
            art += 1
    write_manifest(out_dir / "manifest.jsonl", entries)
    vocab = synthetic_vocab()
    vocab.save(out_dir / "vocab.txt")
    return {"manifest": str(out_dir / "manifest.jsonl"), "vocab": str(out_dir / "vocab.txt"),
            "entries": entries}


def synthetic_vocab() -> Vocab:
    texts = [caption_for(m, s, p, z) for m in MODALITY_WEIGHTS for s in SHAPES for p in POSITIONS for z in SIZES]
    return build_vocab(texts, extra_specials=("[FINDING]", "[ANATOMY]"))


# Run-config overrides for the shapes task. Captions name left and right, so
# flipping is off; the longer schedule and higher step size let the toy
# encoder resolve shapes from 200 images.
SYNTHETIC_TASK = {
    "augment.flip_p": "0",
    "train.epochs": "150",
    "train.patience": "20",
    "train.lr": "2e-3",
    "train.seeds": "42",
}


def task_overrides(data_dir, **extra) -> list:
    """``--set`` lines pointing a run at a generated corpus under ``data_dir``."""
    data_dir = Path(data_dir)
    values = {**SYNTHETIC_TASK, "data.manifest": str(data_dir / "manifest.jsonl"),
              "data.vocab": str(data_dir / "vocab.txt"), **{k: str(v) for k, v in extra.items()}}
    return [f"{k}={v}" for k, v in values.items()]
