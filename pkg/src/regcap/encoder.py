"""Hierarchical shifted-window attention encoder (Swin-style, no relative position bias)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import MLP, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Rng, Tensor


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    stage_depths: tuple = (2, 2)
    stage_dims: tuple = (32, 64)
    window_size: int = 4
    heads_per_stage: tuple = (2, 4)
    mlp_ratio: int = 4
    freeze: bool = False

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        """Swin-Base at 224 px: 56 -> 28 -> 14 -> 7 grid, 1024 output channels."""
        return cls(
            image_size=224,
            patch_size=4,
            stage_depths=(2, 2, 18, 2),
            stage_dims=(128, 256, 512, 1024),
            window_size=7,
            heads_per_stage=(4, 8, 16, 32),
        )

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_dims = tuple(self.stage_dims)
        self.heads_per_stage = tuple(self.heads_per_stage)
        self.validate()

    def validate(self):
        n = len(self.stage_depths)
        if not (len(self.stage_dims) == len(self.heads_per_stage) == n) or n == 0:
            raise ConfigError("stage_depths, stage_dims and heads_per_stage need equal non-zero length")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for i in range(1, n):
            if self.stage_dims[i] != 2 * self.stage_dims[i - 1]:
                raise ConfigError("patch merging doubles the width: stage_dims[i] must be 2*stage_dims[i-1]")
        for i, g in enumerate(self.grid_sizes):
            if g % self.window_size:
                raise ConfigError(f"stage {i} grid {g} not divisible by window {self.window_size}")
            if self.stage_dims[i] % self.heads_per_stage[i]:
                raise ConfigError(f"stage {i}: {self.heads_per_stage[i]} heads do not divide {self.stage_dims[i]}")

    @property
    def grid_sizes(self) -> list:
        g = self.image_size // self.patch_size
        sizes = []
        for i in range(len(self.stage_depths)):
            if i > 0:
                if g % 2:
                    raise ConfigError(f"cannot merge odd grid {g}")
                g //= 2
            sizes.append(g)
        return sizes

    @property
    def final_grid(self) -> int:
        return self.grid_sizes[-1]

    @property
    def final_dim(self) -> int:
        return self.stage_dims[-1]

    @property
    def num_regions(self) -> int:
        return self.final_grid ** 2


@dataclass
class FeatureGrid:
    """Region features stored flattened row-major over (height, width): ``values`` is [B, H*W, C]."""

    values: Tensor
    height: int
    width: int

    def __post_init__(self):
        b, n, _ = self.values.shape
        if n != self.height * self.width:
            raise ShapeError(f"grid {self.height}x{self.width} does not match {n} regions")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def num_regions(self) -> int:
        return self.height * self.width

    def spatial(self) -> Tensor:
        return self.values.reshape(self.batch, self.height, self.width, self.channels)


def patchify(image: Tensor, cfg: EncoderConfig, embed: Linear | None = None) -> Tensor:
    """Cut [B, C, S, S] into non-overlapping p x p patches.

    Returns the raw patches [B, (S/p)^2, C*p*p] or, with ``embed``, their
    linear embedding.
    """
    if image.ndim != 4 or image.shape[1] != cfg.in_channels or image.shape[2:] != (cfg.image_size,) * 2:
        raise ShapeError(
            f"expected image [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}], got {image.shape}"
        )
    b, c, s, _ = image.shape
    p = cfg.patch_size
    g = s // p
    patches = image.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
    return embed(patches) if embed is not None else patches


def window_partition(grid: FeatureGrid, w: int) -> Tensor:
    """[B, H*W, C] -> [B*nW, w*w, C]; windows ordered row-major per image."""
    if grid.height % w or grid.width % w:
        raise ConfigError(f"grid {grid.height}x{grid.width} not divisible by window {w}")
    b, c = grid.batch, grid.channels
    x = grid.values.reshape(b, grid.height // w, w, grid.width // w, w, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, w * w, c)


def window_merge(windows: Tensor, w: int, height: int, width: int) -> FeatureGrid:
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    nh, nw = height // w, width // w
    b = windows.shape[0] // (nh * nw)
    x = windows.reshape(b, nh, nw, w, w, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, height * width, c)
    return FeatureGrid(x, height, width)


def cyclic_shift(grid: FeatureGrid, dy: int, dx: int) -> FeatureGrid:
    """Toroidal roll of the grid: the region at (i, j) moves to (i+dy, j+dx)."""
    if dy == 0 and dx == 0:
        return grid
    x = T.roll(grid.spatial(), (dy, dx), (1, 2))
    return FeatureGrid(x.reshape(grid.batch, grid.num_regions, grid.channels), grid.height, grid.width)


def shifted_window_mask(height: int, width: int, w: int, shift: int) -> np.ndarray:
    """Additive [nW, w*w, w*w] mask for a grid rolled by (-shift, -shift).

    Tokens that were not contiguous before the roll (they only share a
    window because of the wrap-around) get ``-inf``.
    """
    labels = np.zeros((height, width))
    cnt = 0
    bands = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = cnt
            cnt += 1
    win = labels.reshape(height // w, w, width // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, T.NEG_INF)


def window_attention(windows: Tensor, attn: MultiHeadAttention, mask: np.ndarray | None = None,
                     return_weights: bool = False):
    """Multi-head self-attention inside each window.

    ``mask`` is [nW, w*w, w*w]; it is tiled over the images in the batch.
    """
    if windows.shape[-1] % attn.heads:
        raise ConfigError(f"{attn.heads} heads do not divide {windows.shape[-1]} channels")
    full = None
    if mask is not None:
        reps = windows.shape[0] // mask.shape[0]
        full = np.tile(mask, (reps, 1, 1))[:, None]
    return attn(windows, mask=full, return_weights=return_weights)


class SwinBlock(Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: int, rng: Rng):
        self.window, self.shift = window, shift
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)
        self._mask_cache = {}

    def _mask(self, h: int, w: int):
        if not self.shift:
            return None
        if (h, w) not in self._mask_cache:
            self._mask_cache[(h, w)] = shifted_window_mask(h, w, self.window, self.shift)
        return self._mask_cache[(h, w)]

    def __call__(self, grid: FeatureGrid, return_weights: bool = False):
        h, w = grid.height, grid.width
        normed = FeatureGrid(self.norm1(grid.values), h, w)
        shifted = cyclic_shift(normed, -self.shift, -self.shift)
        windows = window_partition(shifted, self.window)
        out = window_attention(windows, self.attn, self._mask(h, w), return_weights)
        weights = None
        if return_weights:
            out, weights = out
        merged = cyclic_shift(window_merge(out, self.window, h, w), self.shift, self.shift)
        x = grid.values + merged.values
        x = x + self.mlp(self.norm2(x))
        result = FeatureGrid(x, h, w)
        return (result, weights) if return_weights else result


class PatchMerge(Module):
    """2x2 neighbourhood concat (4C) -> LayerNorm -> linear 4C -> 2C; halves H and W."""

    def __init__(self, dim: int, rng: Rng):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def __call__(self, grid: FeatureGrid) -> FeatureGrid:
        return patch_merge(grid, self)


def patch_merge(grid: FeatureGrid, merge: PatchMerge | None = None) -> FeatureGrid:
    """Concatenate each 2x2 neighbourhood as (top-left, bottom-left, top-right, bottom-right).

    Without ``merge`` the 4C concatenation is returned unreduced.
    """
    h, w = grid.height, grid.width
    if h % 2 or w % 2:
        raise ConfigError(f"patch merge needs even extents, got {h}x{w}")
    b, c = grid.batch, grid.channels
    x = grid.values.reshape(b, h // 2, 2, w // 2, 2, c)
    x = x.transpose(0, 1, 3, 4, 2, 5).reshape(b, (h // 2) * (w // 2), 4 * c)
    if merge is not None:
        x = merge.reduction(merge.norm(x))
    return FeatureGrid(x, h // 2, w // 2)


class SwinEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = Linear(cfg.in_channels * p * p, cfg.stage_dims[0], rng)
        self.patch_norm = LayerNorm(cfg.stage_dims[0])
        self.stages = []
        self.merges = []
        for i, (depth, dim, heads) in enumerate(zip(cfg.stage_depths, cfg.stage_dims, cfg.heads_per_stage)):
            if i > 0:
                self.merges.append(PatchMerge(cfg.stage_dims[i - 1], rng))
            g = cfg.grid_sizes[i]
            shift = cfg.window_size // 2 if g > cfg.window_size else 0
            blocks = [
                SwinBlock(dim, heads, cfg.window_size, shift if j % 2 else 0, cfg.mlp_ratio, rng)
                for j in range(depth)
            ]
            self.stages.append(blocks)
        self.stages = [_Stage(blocks) for blocks in self.stages]
        self.norm = LayerNorm(cfg.final_dim)
        if cfg.freeze:
            for prm in self.parameters():
                prm.frozen = True

    def __call__(self, image: Tensor) -> FeatureGrid:
        return encode_image(image, self)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks


def encode_image(image: Tensor, encoder: SwinEncoder) -> FeatureGrid:
    """patchify -> per stage (W-MSA, SW-MSA blocks) with patch merging in between -> LayerNorm."""
    cfg = encoder.cfg
    x = encoder.patch_norm(patchify(image, cfg, encoder.patch_embed))
    g = cfg.image_size // cfg.patch_size
    grid = FeatureGrid(x, g, g)
    for i, stage in enumerate(encoder.stages):
        if i > 0:
            grid = encoder.merges[i - 1](grid)
        for block in stage.blocks:
            grid = block(grid)
    return FeatureGrid(encoder.norm(grid.values), grid.height, grid.width)
