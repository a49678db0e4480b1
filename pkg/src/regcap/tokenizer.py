"""Greedy longest-match subword tokenizer with ``##`` continuation pieces."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = "[PAD]", "[BOS]", "[EOS]", "[UNK]"
SPECIALS = (PAD, BOS, EOS, UNK)
_BASIC = re.compile(r"\w+|[^\w\s]")


class Vocab:
    """Ordered subword list; ids are dense from 0 and the four specials come first."""

    def __init__(self, pieces, extra_specials=()):
        pieces = list(pieces)
        head = [p for p in SPECIALS]
        rest = [p for p in pieces if p not in SPECIALS]
        extras = [s for s in extra_specials if s not in head]
        ordered = head + extras + [p for p in rest if p not in extras]
        if len(set(ordered)) != len(ordered):
            raise ValueError("duplicate entries in vocabulary")
        self.pieces = ordered
        self.index = {p: i for i, p in enumerate(ordered)}
        self.domain_specials = tuple(extras)

    @classmethod
    def load(cls, path) -> "Vocab":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"vocab file not found: {path}")
        lines = [ln.rstrip("\n") for ln in path.read_text(encoding="utf-8").splitlines()]
        lines = [ln for ln in lines if ln]
        extras = [ln for ln in lines if ln.startswith("[") and ln.endswith("]") and ln not in SPECIALS]
        return cls(lines, extras)

    def save(self, path):
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    def __len__(self):
        return len(self.pieces)

    def __contains__(self, piece):
        return piece in self.index

    def id(self, piece: str) -> int:
        return self.index.get(piece, self.unk_id)

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def bos_id(self):
        return self.index[BOS]

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def unk_id(self):
        return self.index[UNK]


def basic_split(text: str) -> list:
    return _BASIC.findall(text.lower())


def wordpiece(word: str, vocab: Vocab, max_chars: int = 100) -> list:
    """Split one word into the longest matching pieces, or ``[UNK]`` if any span is uncovered."""
    if word in vocab.index and word not in SPECIALS:
        return [word]
    if len(word) > max_chars:
        return [UNK]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            sub = word[start:end] if start == 0 else "##" + word[start:end]
            if sub in vocab.index:
                match = sub
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab, max_len: int = 128):
    """[BOS] pieces [EOS] padded with [PAD] to ``max_len``; returns (ids, true_length).

    Over-long inputs are truncated so the final kept id is still EOS.
    """
    if max_len < 2:
        raise ValueError("max_len must leave room for BOS and EOS")
    ids = []
    for word in basic_split(text):
        ids.extend(vocab.id(p) for p in wordpiece(word, vocab))
    ids = [vocab.bos_id] + ids[: max_len - 2] + [vocab.eos_id]
    length = len(ids)
    out = np.full(max_len, vocab.pad_id, dtype=np.int64)
    out[:length] = ids
    return out, length


def detokenize(ids, vocab: Vocab) -> str:
    """Inverse of :func:`tokenize` for fully covered text; stops at EOS, drops specials."""
    words = []
    for i in ids:
        i = int(i)
        if i == vocab.eos_id:
            break
        piece = vocab.pieces[i]
        if piece in SPECIALS and piece != UNK:
            continue
        if piece.startswith("##") and words:
            words[-1] += piece[2:]
        else:
            words.append(piece)
    return " ".join(words)


def build_vocab(texts, extra_specials=()) -> Vocab:
    """Whole-word vocabulary from a corpus, sorted for determinism."""
    words = sorted({w for t in texts for w in basic_split(t)})
    return Vocab(list(SPECIALS) + list(extra_specials) + words, extra_specials)
