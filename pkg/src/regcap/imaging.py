"""8-bit image buffers, PGM/PPM I/O, resizing, normalisation and training-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .tensor import Rng

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


@dataclass
class ImageBuffer:
    pixels: np.ndarray  # [H, W, C] uint8, C in {1, 3}

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise DataError(f"image must be HxWx1 or HxWx3, got {px.shape}")
        self.pixels = px.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _read_token(data: bytes, pos: int):
    while pos < len(data):
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pnm(path) -> ImageBuffer:
    """Read a binary PGM (P5) or PPM (P6) with maxval <= 255."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: only P5/P6 images are supported, found {magic!r}")
    w, pos = _read_token(data, pos)
    h, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise DataError(f"{path}: 16-bit images are not supported")
    c = 1 if magic == b"P5" else 3
    raw = np.frombuffer(data[pos + 1:pos + 1 + w * h * c], dtype=np.uint8)
    if raw.size != w * h * c:
        raise DataError(f"{path}: truncated pixel data")
    px = raw.reshape(h, w, c)
    if maxval != 255:
        px = np.round(px.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return ImageBuffer(px)


def write_pnm(path, image: ImageBuffer | np.ndarray):
    img = image if isinstance(image, ImageBuffer) else ImageBuffer(image)
    magic = b"P5" if img.channels == 1 else b"P6"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + f" {img.width} {img.height} 255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img.pixels).tobytes())


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an [H, W, C] float array, edges clamped."""
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.astype(np.float64, copy=True)
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    a = arr.astype(np.float64)
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess_image(img: ImageBuffer, size: int) -> np.ndarray:
    """Resize to size x size, replicate grey to 3 channels, ImageNet-normalise -> [3, size, size]."""
    if img.height == 0 or img.width == 0:
        raise DataError("zero-sized image")
    px = img.pixels
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    x = resize_bilinear(px, size, size) / 255.0
    x = (x - IMAGENET_MEAN) / IMAGENET_STD
    return x.transpose(2, 0, 1)


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    rotate_p: float = 0.5
    max_degrees: float = 10.0
    brightness_p: float = 0.5
    contrast_p: float = 0.5
    jitter: float = 0.2
    noise_p: float = 0.5
    noise_sigma: float = 0.02  # fraction of the 0..255 range

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip_p=0.0, rotate_p=0.0, brightness_p=0.0, contrast_p=0.0, noise_p=0.0)


def hflip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[:, ::-1].copy())


def rotate(img: ImageBuffer, degrees: float) -> ImageBuffer:
    out = ndimage.rotate(img.pixels.astype(np.float64), degrees, axes=(1, 0), reshape=False,
                         order=1, mode="nearest")
    return ImageBuffer(np.clip(np.round(out), 0, 255))


def adjust_brightness(img: ImageBuffer, factor: float) -> ImageBuffer:
    return ImageBuffer(np.clip(np.round(img.pixels * float(factor)), 0, 255))


def adjust_contrast(img: ImageBuffer, factor: float) -> ImageBuffer:
    px = img.pixels.astype(np.float64)
    m = px.mean()
    return ImageBuffer(np.clip(np.round((px - m) * factor + m), 0, 255))


def add_noise(img: ImageBuffer, rng: Rng, sigma: float) -> ImageBuffer:
    px = img.pixels + rng.normal(0.0, sigma * 255.0, img.pixels.shape)
    return ImageBuffer(np.clip(np.round(px), 0, 255))


def augment(img: ImageBuffer, rng: Rng, cfg: AugmentConfig | None = None) -> ImageBuffer:
    """Random flip, rotation, brightness, contrast and noise, each gated by its probability.

    Every gate and parameter is drawn even when unused so the stream
    consumption does not depend on the outcomes.
    """
    cfg = cfg or AugmentConfig()
    gates = rng.random(5)
    angle = rng.uniform(-cfg.max_degrees, cfg.max_degrees)
    bright, contrast = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter, 2)
    noise_rng = Rng(int(rng.integers(0, 2 ** 32)))
    if gates[0] < cfg.flip_p:
        img = hflip(img)
    if gates[1] < cfg.rotate_p:
        img = rotate(img, angle)
    if gates[2] < cfg.brightness_p:
        img = adjust_brightness(img, bright)
    if gates[3] < cfg.contrast_p:
        img = adjust_contrast(img, contrast)
    if gates[4] < cfg.noise_p:
        img = add_noise(img, noise_rng, cfg.noise_sigma)
    return img
