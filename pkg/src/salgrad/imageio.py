"""8-bit raster I/O. Everything inside the library is float64 in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        rgb = im.convert("RGB")
    return np.asarray(rgb, dtype=np.float64) / 255.0


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        g = im.convert("L")
    return np.asarray(g, dtype=np.float64) / 255.0


def read_mask(path, soft: bool = False) -> np.ndarray:
    """Binarize at 128; ``soft`` feathers the edge with a 2 px Gaussian."""
    with Image.open(path) as im:
        im.load()
        g = np.asarray(im.convert("L"))
    mask = (g >= 128).astype(np.float64)
    if soft:
        mask = np.clip(ndimage.gaussian_filter(mask, 2.0, mode="nearest"), 0.0, 1.0)
    return mask


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Fixed encoder settings so identical arrays give identical bytes."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(Path(path), format="PNG", optimize=False, compress_level=6)


def write_gray(path, values: np.ndarray) -> None:
    """Saliency-style map in [0, 1] stored as round(255 * s)."""
    write_png(path, to_uint8(values))
