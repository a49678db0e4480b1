"""Tiny stand-in models for decoding oracles."""

import numpy as np


class TableModel:
    """Next-token log-probs drawn from a fixed random table indexed by the whole prefix."""

    def __init__(self, vocab_size, seed, temperature=1.0):
        self.vocab_size, self.seed, self.temperature = vocab_size, seed, temperature

    def _row(self, prefix):
        logits = np.random.default_rng([self.seed, *map(int, prefix)]).normal(size=self.vocab_size)
        logits = logits / self.temperature
        return logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()

    def next_token_logprobs(self, prefix, memory):
        return np.stack([self._row(p) for p in np.asarray(prefix)])
