"""Regional attention: per-region scores, reweighting, projection to decoder width, token pooling.

Two readings of the weighting step are supported:

``reweight`` (default)
    every region keeps its own slot and is scaled by ``N * alpha_i``; uniform
    weights leave the sequence untouched.
``collapse``
    the weighted sum over regions produces one vector, broadcast back to all
    ``N`` slots so pooling still has a sequence to reduce.

``off`` skips the weighting entirely (ablation arm) and reports uniform weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import FeatureGrid
from .errors import ConfigError, ContractError, ShapeError
from .layers import Module
from .tensor import Parameter, Rng, Tensor

MODES = ("reweight", "collapse", "off")


@dataclass
class RegionalConfig:
    mode: str = "reweight"
    tokens: int = 8
    dropout: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"regional mode must be one of {MODES}, got {self.mode!r}")
        if self.tokens < 1:
            raise ConfigError("token count must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass
class RegionalAttentionOutput:
    alpha: Tensor       # [B, N]
    attended: Tensor    # [B, N, C]
    projected: Tensor   # [B, N, D]
    pooled: Tensor      # [B, K, D]


class RegionalAttention(Module):
    def __init__(self, channels: int, model_dim: int, cfg: RegionalConfig, rng: Rng, std: float = 0.02):
        self.cfg = cfg
        self.channels, self.model_dim = channels, model_dim
        self.score_weight = Parameter(rng.trunc_normal((1, channels), std))
        self.score_bias = Parameter(np.zeros(1))
        self.proj_weight = Parameter(rng.trunc_normal((model_dim, channels), std))

    def __call__(self, grid: FeatureGrid, rng: Rng | None = None) -> RegionalAttentionOutput:
        return regional_forward(grid, self, self.cfg.tokens, rng=rng, mode=self.cfg.mode)


def region_scores(grid: FeatureGrid, params: RegionalAttention) -> Tensor:
    """alpha = softmax over regions of (score_weight . F_flat + score_bias), shape [B, N]."""
    if grid.channels != params.channels:
        raise ShapeError(f"grid has {grid.channels} channels, scorer expects {params.channels}")
    logits = T.matmul(grid.values, T.transpose(params.score_weight)) + params.score_bias
    return T.softmax(logits.reshape(grid.batch, grid.num_regions), axis=-1)


def attend(grid: FeatureGrid, alpha: Tensor, mode: str = "reweight") -> Tensor:
    row_sums = alpha.data.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-8):
        raise ContractError(f"alpha rows must sum to 1, got {row_sums}")
    n = grid.num_regions
    weights = alpha.reshape(grid.batch, n, 1)
    if mode == "reweight":
        # alpha / (1/N) rather than alpha * N: exact 1.0 for uniform alpha
        return grid.values * (weights / (1.0 / n))
    if mode == "collapse":
        summed = (grid.values * weights).sum(axis=1, keepdims=True)
        return summed + Tensor(np.zeros((1, n, 1)))
    raise ConfigError(f"attend has no mode {mode!r}")


def project(attended: Tensor, params: RegionalAttention, rng: Rng | None = None, training: bool = False) -> Tensor:
    """Linear C -> D (no bias) followed by dropout while training."""
    if attended.shape[-1] != params.channels:
        raise ShapeError(f"projection expects {params.channels} channels, got {attended.shape[-1]}")
    out = T.matmul(attended, T.transpose(params.proj_weight))
    return T.dropout(out, params.cfg.dropout, rng, training)


def pool_bins(n: int, k: int) -> list:
    """Bin k covers indices [floor(k*n/K), ceil((k+1)*n/K))."""
    if not 1 <= k <= n:
        raise ConfigError(f"cannot pool {n} tokens to {k}")
    return [(i * n // k, -(-(i + 1) * n // k)) for i in range(k)]


def pool_matrix(n: int, k: int) -> np.ndarray:
    m = np.zeros((k, n))
    for row, (lo, hi) in enumerate(pool_bins(n, k)):
        m[row, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_pool(seq: Tensor, k: int) -> Tensor:
    """Average contiguous bins of a [B, N, D] sequence down to [B, K, D]."""
    return T.matmul(Tensor(pool_matrix(seq.shape[1], k)), seq)


def regional_forward(grid: FeatureGrid, params: RegionalAttention, k: int, rng: Rng | None = None,
                     mode: str | None = None) -> RegionalAttentionOutput:
    mode = mode or params.cfg.mode
    if mode == "off":
        alpha = Tensor(np.full((grid.batch, grid.num_regions), 1.0 / grid.num_regions))
        attended = grid.values
    else:
        alpha = region_scores(grid, params)
        attended = attend(grid, alpha, mode)
    projected = project(attended, params, rng, params.training)
    return RegionalAttentionOutput(alpha, attended, projected, adaptive_pool(projected, k))


def bin_coverage(n: int, k: int) -> np.ndarray:
    """How many pooling bins read each input index."""
    cov = np.zeros(n, dtype=int)
    for lo, hi in pool_bins(n, k):
        cov[lo:hi] += 1
    return cov


__all__ = [
    "MODES", "RegionalConfig", "RegionalAttention", "RegionalAttentionOutput", "region_scores",
    "attend", "project", "pool_bins", "pool_matrix", "adaptive_pool", "regional_forward", "bin_coverage",
]
