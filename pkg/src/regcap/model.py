"""The full captioner: encoder -> regional attention -> decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import CaptionDecoder, DecoderConfig, decode_logits, next_token_logprobs
from .encoder import EncoderConfig, FeatureGrid, SwinEncoder
from .layers import Module
from .regional import RegionalAttention, RegionalAttentionOutput, RegionalConfig
from .tensor import Rng, Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    regional: RegionalConfig = field(default_factory=RegionalConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pad_id: int = 0


class CaptionModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 42, embedding=None):
        self.cfg = cfg
        rng = Rng(seed).child("init")
        self.encoder = SwinEncoder(cfg.encoder, rng.child("encoder"))
        self.regional = RegionalAttention(
            cfg.encoder.final_dim, cfg.decoder.model_dim, cfg.regional, rng.child("regional")
        )
        self.decoder = CaptionDecoder(cfg.decoder, Rng(seed).child("decoder-init"), embedding)

    def encode(self, images, rng: Rng | None = None) -> tuple[FeatureGrid, RegionalAttentionOutput]:
        grid = self.encoder(T.as_tensor(images))
        return grid, self.regional(grid, rng)

    def loss(self, images, tokens, rng: Rng | None = None) -> Tensor:
        """Teacher-forced cross-entropy: inputs tokens[:, :-1], targets tokens[:, 1:], PAD ignored."""
        tokens = np.asarray(tokens, dtype=np.int64)
        _, reg = self.encode(images, rng)
        logits = decode_logits(tokens[:, :-1], reg.pooled, self.decoder)
        return T.cross_entropy(logits, tokens[:, 1:], ignore_index=self.cfg.pad_id)

    def next_token_logprobs(self, prefix, memory: Tensor) -> np.ndarray:
        return next_token_logprobs(prefix, memory, self.decoder)
