"""Beam-search caption decoding and an exhaustive oracle for tiny search spaces.

A model here is anything with ``next_token_logprobs(prefix, memory) -> [b, V]``
where ``prefix`` is an int array [b, t] starting with BOS and ``memory`` is the
pooled image tokens repeated along the batch (or ``None`` for table models).
Hypothesis tokens exclude BOS; a hypothesis is finished when it ends in EOS or
holds ``max_length`` tokens.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OracleScopeError
from .tensor import Tensor

ORACLE_LIMIT = 10 ** 6


@dataclass
class DecodeConfig:
    beam_size: int = 4
    length_penalty: float = 1.1
    no_repeat_ngram: int = 3
    max_length: int = 128
    bos_id: int = 1
    eos_id: int = 2
    pad_id: int = 0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.max_length < 2:
            raise ConfigError("max_length must be >= 2")


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    finished: bool = False
    score: float = field(default=float("-inf"))


def final_score(h: Hypothesis, lp: float) -> float:
    """Cumulative log-probability divided by ``len(tokens) ** lp`` (EOS counted, BOS not)."""
    return h.logprob / (len(h.tokens) ** lp)


def banned_tokens(prefix, n: int) -> set:
    """Tokens that would complete an n-gram already present in ``prefix``."""
    if n < 1:
        raise ConfigError("n-gram size must be >= 1")
    prefix = tuple(prefix)
    if n == 1:
        return set(prefix)
    if len(prefix) < n - 1:
        return set()
    tail = prefix[len(prefix) - n + 1:]
    return {prefix[i + n - 1] for i in range(len(prefix) - n + 1) if prefix[i:i + n - 1] == tail}


def block_repeat_ngrams(prefix, n: int, logprobs: np.ndarray) -> np.ndarray:
    out = np.array(logprobs, dtype=np.float64, copy=True)
    if n > 0:
        for tok in banned_tokens(prefix, n):
            out[tok] = -np.inf
    return out


def _expand_memory(memory, count: int):
    if memory is None:
        return None
    data = memory.data if isinstance(memory, Tensor) else np.asarray(memory)
    return Tensor(np.repeat(data[:1], count, axis=0))


def _step(model, hyps, memory, cfg: DecodeConfig) -> np.ndarray:
    prefix = np.array([(cfg.bos_id,) + h.tokens for h in hyps], dtype=np.int64)
    logprobs = model.next_token_logprobs(prefix, _expand_memory(memory, len(hyps)))
    if cfg.no_repeat_ngram > 0:
        logprobs = np.stack([block_repeat_ngrams(h.tokens, cfg.no_repeat_ngram, lp) for h, lp in zip(hyps, logprobs)])
    return logprobs


def _rank_key(h: Hypothesis):
    return (-h.score, h.tokens)


def beam_search(memory, model, cfg: DecodeConfig, return_all: bool = False):
    """Best hypothesis under ``final_score``; optionally all finished ones, best first.

    Each step keeps the ``width`` best expansions by cumulative log-probability
    (ties broken by token ids). Expansions ending in EOS or reaching
    ``max_length`` leave the beam and shrink ``width`` by one, so a beam of
    one is exactly greedy decoding. Search also stops once no live hypothesis
    can outscore the best finished one.
    """
    live = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    width = cfg.beam_size
    lp = cfg.length_penalty
    while live and width > 0:
        logprobs = _step(model, live, memory, cfg)
        candidates = []
        for h, row in zip(live, logprobs):
            for tok in np.nonzero(np.isfinite(row))[0]:
                candidates.append(Hypothesis(h.tokens + (int(tok),), h.logprob + float(row[tok])))
        candidates.sort(key=lambda c: (-c.logprob, c.tokens))
        live = []
        for cand in candidates[:width]:
            if cand.tokens[-1] == cfg.eos_id or len(cand.tokens) >= cfg.max_length:
                cand.finished = True
                cand.score = final_score(cand, lp)
                finished.append(cand)
            else:
                live.append(cand)
        width -= sum(1 for c in candidates[:width] if c.finished)
        if finished and live:
            best = max(h.score for h in finished)
            # log-probs only fall; with lp >= 0 the longest length divides least
            bound = max(h.logprob / (cfg.max_length ** lp if h.logprob < 0 else 1.0) for h in live)
            if lp >= 0 and best > bound:
                break
        live = live[:width]
    if not finished:
        finished = [Hypothesis((), float("-inf"), True, float("-inf"))]
    finished.sort(key=_rank_key)
    return (finished[0], finished) if return_all else finished[0]


def greedy_decode(memory, model, cfg: DecodeConfig) -> Hypothesis:
    """Argmax chain with n-gram blocking; lowest token id wins ties."""
    h = Hypothesis((), 0.0)
    while True:
        row = _step(model, [h], memory, cfg)[0]
        if not np.isfinite(row).any():
            return Hypothesis((), float("-inf"), True, float("-inf"))
        tok = int(np.argmax(row))
        h = Hypothesis(h.tokens + (tok,), h.logprob + float(row[tok]))
        if tok == cfg.eos_id or len(h.tokens) >= cfg.max_length:
            h.finished = True
            h.score = final_score(h, cfg.length_penalty)
            return h


def search_space_size(vocab_size: int, max_length: int) -> int:
    return vocab_size ** max_length


def exhaustive_decode(memory, model, cfg: DecodeConfig, vocab_size: int, return_all: bool = False):
    """Score every finished sequence reachable within ``max_length`` tokens and return the best."""
    if search_space_size(vocab_size, cfg.max_length) > ORACLE_LIMIT:
        raise OracleScopeError(
            f"{vocab_size}^{cfg.max_length} sequences exceed the oracle limit of {ORACLE_LIMIT}"
        )
    finished = []
    frontier = [Hypothesis((), 0.0)]
    while frontier:
        nxt = []
        for h in frontier:
            row = _step(model, [h], memory, cfg)[0]
            for tok in range(vocab_size):
                if not np.isfinite(row[tok]):
                    continue
                c = Hypothesis(h.tokens + (tok,), h.logprob + float(row[tok]))
                if tok == cfg.eos_id or len(c.tokens) >= cfg.max_length:
                    c.finished = True
                    c.score = final_score(c, cfg.length_penalty)
                    finished.append(c)
                else:
                    nxt.append(c)
        frontier = nxt
    if not finished:
        finished = [Hypothesis((), float("-inf"), True, float("-inf"))]
    finished.sort(key=_rank_key)
    return (finished[0], finished) if return_all else finished[0]


def has_repeated_ngram(tokens, n: int) -> bool:
    grams = [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
    return len(grams) != len(set(grams))


def all_sequences(vocab_size: int, length: int):
    """Every raw token sequence of exactly ``length`` tokens (oracle helper)."""
    return itertools.product(range(vocab_size), repeat=length)
