"""8-bit RGB previews, comparison grids and full-precision array dumps."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, PngImagePlugin


def to_rgb8(img, bands: Sequence[int] = (3, 2, 1)) -> np.ndarray:
    """Clamp a CHW image to [0, 1] and return an HxWx3 uint8 array of ``bands``."""
    a = np.asarray(img, dtype=np.float64)
    if a.shape[0] >= 3:
        rgb = a[list(bands)]
    else:
        rgb = np.repeat(a[:1], 3, axis=0)
    rgb = np.clip(rgb, 0.0, 1.0)
    return np.round(rgb.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def _png_info(config_hash: Optional[str]) -> PngImagePlugin.PngInfo:
    info = PngImagePlugin.PngInfo()
    if config_hash:
        info.add_text("dbcr_config_hash", config_hash)
    return info


def save_png(path, rgb8: np.ndarray, config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb8).save(path, pnginfo=_png_info(config_hash))
    return path


def save_array(path, img, config_hash: Optional[str] = None, **meta) -> Path:
    """Write the unclamped float32 tensor as .npy with a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(img, dtype=np.float32))
    side = {"config_hash": config_hash, "shape": list(np.shape(img)), **meta}
    path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, default=str) + "\n")
    return path


def grid(panels: Sequence, bands: Sequence[int] = (3, 2, 1), pad: int = 2) -> np.ndarray:
    """Side-by-side RGB panels separated by white gutters."""
    tiles = [to_rgb8(p, bands) for p in panels]
    h = max(t.shape[0] for t in tiles)
    gutter = np.full((h, pad, 3), 255, np.uint8)
    row = []
    for i, t in enumerate(tiles):
        if i:
            row.append(gutter)
        row.append(t)
    return np.concatenate(row, axis=1)
