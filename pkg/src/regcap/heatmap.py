"""Region-weight heatmaps: alpha JSON in, 8-bit PGM (and optional PPM overlay) out."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError
from .imaging import ImageBuffer, read_pnm, resize_bilinear, write_pnm


def alpha_document(alpha, height: int, width: int, ids=None) -> dict:
    """Serializable record of region weights [B][N] for a height x width encoder grid."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha[None]
    doc = {"alpha": alpha.tolist(), "grid": {"height": int(height), "width": int(width)}}
    if ids is not None:
        doc["ids"] = [str(i) for i in ids]
    return doc


def write_alpha(path, alpha, height: int, width: int, ids=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(alpha_document(alpha, height, width, ids)), encoding="utf-8")


def heatmap_pixels(alpha, height: int, width: int, out_h: int, out_w: int) -> np.ndarray:
    """Reshape to the grid, bilinearly upscale, min-max scale to uint8. A flat map becomes all zeros."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if alpha.size != height * width:
        raise ContractError(f"alpha has {alpha.size} entries, grid {height}x{width} needs {height * width}")
    up = resize_bilinear(alpha.reshape(height, width, 1), out_h, out_w)[:, :, 0]
    lo, hi = up.min(), up.max()
    scaled = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    return np.round(scaled * 255.0).astype(np.uint8)


def overlay(image: ImageBuffer, heat: np.ndarray) -> ImageBuffer:
    """50/50 blend of the image with a blue-to-red rendering of the heat map."""
    base = image.pixels.astype(np.float64)
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    h = heat.astype(np.float64)
    colour = np.stack([h, np.zeros_like(h), 255.0 - h], axis=2)
    return ImageBuffer(np.clip(np.round(0.5 * base + 0.5 * colour), 0, 255))


def export_heatmap(alpha_json, image_path, out_path, overlay_path=None, index: int = 0) -> Path:
    """Render row ``index`` of an alpha document at the size of ``image_path``."""
    doc = json.loads(Path(alpha_json).read_text(encoding="utf-8"))
    rows = doc["alpha"]
    if not 0 <= index < len(rows):
        raise ContractError(f"alpha document has {len(rows)} rows, asked for row {index}")
    image = read_pnm(image_path)
    heat = heatmap_pixels(rows[index], doc["grid"]["height"], doc["grid"]["width"], image.height, image.width)
    out_path = Path(out_path)
    write_pnm(out_path, ImageBuffer(heat))
    if overlay_path:
        write_pnm(overlay_path, overlay(image, heat))
    return out_path
