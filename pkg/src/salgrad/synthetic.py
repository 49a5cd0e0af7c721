"""Synthetic test scenes used by the benchmarks and the test-suite."""

from __future__ import annotations

import numpy as np

GRAY = (0.5, 0.5, 0.5)
RED = (1.0, 0.0, 0.0)


def disk_mask(size: int = 128, radius_frac: float = 0.1, center=None) -> np.ndarray:
    cy, cx = center if center is not None else ((size - 1) / 2, (size - 1) / 2)
    yy, xx = np.mgrid[0:size, 0:size]
    r = radius_frac * size
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)


def disk_image(
    size: int = 128,
    radius_frac: float = 0.1,
    color=RED,
    background=GRAY,
    center=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Flat disk on a flat background. Returns (image, mask)."""
    mask = disk_mask(size, radius_frac, center)
    img = np.empty((size, size, 3))
    img[:] = background
    img[mask > 0] = color
    return img, mask


def stripe_texture(size: int = 128, period: int = 4, low: float = 0.35, high: float = 0.65) -> np.ndarray:
    """Gray diagonal stripes; fine enough to be uniform at the model's center scale."""
    yy, xx = np.mgrid[0:size, 0:size]
    phase = 2 * np.pi * (yy + xx) / period
    v = low + (high - low) * 0.5 * (1 + np.sin(phase))
    return np.repeat(v[..., None], 3, axis=2)


def textured_square(
    size: int = 128,
    side: int = 12,
    color=(0.8, 0.3, 0.2),
    period: int = 4,
    top_left=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Flat-colored square on a periodic texture. Returns (image, mask)."""
    img = stripe_texture(size, period)
    t, l = top_left if top_left is not None else ((size - side) // 2, (size - side) // 2)
    mask = np.zeros((size, size))
    mask[t : t + side, l : l + side] = 1.0
    img[mask > 0] = color
    return img, mask


def two_blobs(size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Two separated colored disks on gray. Returns (image, union mask)."""
    img, m1 = disk_image(size, 0.08, color=RED, center=(size * 0.3, size * 0.3))
    m2 = disk_mask(size, 0.08, center=(size * 0.7, size * 0.7))
    img[m2 > 0] = (0.1, 0.3, 1.0)
    return img, np.maximum(m1, m2)
