"""Captioning and evaluation of trained models over image sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .beam import DecodeConfig, beam_search
from .errors import DataError
from .imaging import preprocess_image
from .metrics import EvalPair, evaluate
from .tokenizer import Vocab, detokenize


@dataclass
class CaptionResult:
    text: str
    tokens: tuple
    score: float
    alpha: np.ndarray  # [N]


def decode_config_for(vocab: Vocab, **overrides) -> DecodeConfig:
    return DecodeConfig(bos_id=vocab.bos_id, eos_id=vocab.eos_id, pad_id=vocab.pad_id, **overrides)


def caption_images(model, images, vocab: Vocab, cfg: DecodeConfig | None = None, image_size: int | None = None,
                   batch_size: int = 16) -> list:
    """Beam-decode one caption per image. ``images`` are ImageBuffers or preprocessed [3,S,S] arrays."""
    cfg = cfg or decode_config_for(vocab)
    size = image_size or model.cfg.encoder.image_size
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            arr = np.stack([im if isinstance(im, np.ndarray) else preprocess_image(im, size) for im in chunk])
            _, reg = model.encode(arr)
            for i in range(len(chunk)):
                hyp = beam_search(T.Tensor(reg.pooled.data[i:i + 1]), model, cfg)
                out.append(CaptionResult(detokenize(hyp.tokens, vocab), hyp.tokens, hyp.score, reg.alpha.data[i].copy()))
    return out


def eval_pairs(model, samples, vocab: Vocab, cfg: DecodeConfig | None = None) -> tuple:
    """Caption every sample and pair it with its reference. Returns (pairs, captions)."""
    if not samples:
        raise DataError("evaluation split is empty")
    caps = caption_images(model, [s.image for s in samples], vocab, cfg)
    pairs = [EvalPair.from_text(c.text, s.caption, s.modality, s.id) for c, s in zip(caps, samples)]
    return pairs, caps


def run_evaluation(model, samples, vocab: Vocab, cfg: DecodeConfig | None = None, embeddings=None, synonyms=None):
    pairs, caps = eval_pairs(model, samples, vocab, cfg)
    return evaluate(pairs, embeddings, synonyms), pairs, caps


def token_accuracy(hypotheses, references, vocabulary) -> float:
    """Fraction of items whose hypothesis names the same word from ``vocabulary`` as the reference."""
    vocabulary = set(vocabulary)
    hits = 0
    for hyp, ref in zip(hypotheses, references):
        want = [w for w in ref.split() if w in vocabulary]
        got = [w for w in hyp.split() if w in vocabulary]
        hits += bool(want) and got[:1] == want[:1]
    return hits / max(1, len(references))
