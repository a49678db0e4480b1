"""Causal transformer caption decoder with cross-attention to pooled image tokens."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors
from .errors import ConfigError, LoadError, ShapeError
from .layers import MLP, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask
from .tensor import Parameter, Rng, Tensor


@dataclass
class DecoderConfig:
    vocab_size: int = 64
    model_dim: int = 32
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_positions: int = 128
    tie_output: bool = True
    freeze_embeddings: bool = True
    # -1: frozen for the whole run; otherwise unfrozen after this many epochs
    unfreeze_after: int = -1
    embedding_path: str = ""

    @classmethod
    def full_scale(cls, vocab_size: int = 30522) -> "DecoderConfig":
        return cls(vocab_size=vocab_size, model_dim=768, layers=6, heads=12, ffn_dim=3072)

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide model_dim {self.model_dim}")
        if self.vocab_size < 1 or self.max_positions < 1:
            raise ConfigError("vocab_size and max_positions must be positive")


class EmbeddingTable(Module):
    def __init__(self, matrix: np.ndarray, frozen: bool = True, provenance: str = "random"):
        self.matrix = Parameter(matrix, frozen=frozen)
        self.provenance = provenance

    @property
    def frozen(self) -> bool:
        return self.matrix.frozen

    @frozen.setter
    def frozen(self, value: bool):
        self.matrix.frozen = value

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]


def random_embedding(vocab_size: int, dim: int, seed: int = 42) -> np.ndarray:
    return Rng(seed).child("embedding").normal(0.0, dim ** -0.5, (vocab_size, dim))


def load_embedding_table(path, expected_vocab: int, expected_dim: int, frozen: bool = True,
                         fallback: str | None = None, seed: int = 42) -> EmbeddingTable:
    """Read a [V, D] table from a tensor file.

    With ``fallback="random"`` a missing file yields a seeded random table
    instead of an error.
    """
    path = Path(path) if path else None
    if path is None or not path.exists():
        if fallback == "random":
            return EmbeddingTable(random_embedding(expected_vocab, expected_dim, seed), frozen, "random")
        raise FileNotFoundError(f"embedding file not found: {path}")
    tensors, _ = load_tensors(path)
    if "embedding" in tensors:
        matrix = tensors["embedding"]
    elif len(tensors) == 1:
        matrix = next(iter(tensors.values()))
    else:
        raise LoadError(f"{path}: expected a single tensor or one named 'embedding'")
    if matrix.shape != (expected_vocab, expected_dim):
        raise LoadError(f"{path}: expected embedding shape ({expected_vocab}, {expected_dim}), found {matrix.shape}")
    return EmbeddingTable(matrix, frozen, str(path))


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: Rng):
        d = cfg.model_dim
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = MLP(d, cfg.ffn_dim, rng)
        self.norm3 = LayerNorm(d)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        x = self.norm1(x + self.self_attn(x, mask=mask))
        x = self.norm2(x + self.cross_attn(x, context=memory))
        return self.norm3(x + self.ffn(x))


class CaptionDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: Rng, embedding: EmbeddingTable | None = None):
        self.cfg = cfg
        if embedding is None:
            embedding = load_embedding_table(
                cfg.embedding_path, cfg.vocab_size, cfg.model_dim, frozen=cfg.freeze_embeddings,
                fallback=None if cfg.embedding_path else "random", seed=rng.seed,
            )
        if embedding.matrix.shape != (cfg.vocab_size, cfg.model_dim):
            raise ShapeError(f"embedding {embedding.matrix.shape} vs config ({cfg.vocab_size}, {cfg.model_dim})")
        self.embedding = embedding
        self.positions = Parameter(rng.trunc_normal((cfg.max_positions, cfg.model_dim), 0.02))
        self.embed_norm = LayerNorm(cfg.model_dim)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.lm_head = None if cfg.tie_output else Linear(cfg.model_dim, cfg.vocab_size, rng, bias=False)

    def __call__(self, tokens, memory: Tensor) -> Tensor:
        return decode_logits(tokens, memory, self)


def decode_logits(tokens, memory: Tensor, dec: CaptionDecoder) -> Tensor:
    """[B, T] token ids + [B, K, D] image tokens -> [B, T, V] logits."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be [B, T], got {tokens.shape}")
    b, t = tokens.shape
    if t > dec.cfg.max_positions:
        raise ShapeError(f"sequence length {t} exceeds max_positions {dec.cfg.max_positions}")
    if memory.shape[0] != b or memory.shape[-1] != dec.cfg.model_dim:
        raise ShapeError(f"memory {memory.shape} incompatible with tokens {tokens.shape}")
    x = T.embedding(dec.embedding.matrix, tokens) + dec.positions[:t]
    x = dec.embed_norm(x)
    mask = causal_mask(t)
    for layer in dec.layers:
        x = layer(x, memory, mask)
    if dec.lm_head is not None:
        return dec.lm_head(x)
    return T.matmul(x, T.transpose(dec.embedding.matrix))


def next_token_logprobs(prefix, memory: Tensor, dec: CaptionDecoder) -> np.ndarray:
    """Log-probabilities [B, V] of the token after ``prefix`` (which starts with BOS)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 2 or prefix.shape[1] == 0:
        raise ShapeError("prefix must be a non-empty [B, t] array")
    with T.no_grad():
        logits = decode_logits(prefix, memory, dec).data[:, -1]
    return T._log_softmax_np(logits)
