"""Differentiable sRGB <-> CIELab conversion and the saliency backend.

The built-in backend is a classical multi-scale center-surround model over
opponent color, intensity and gradient-energy features, squashed to [0, 1]
with a fixed logistic. Any callable mapping an (H, W, 3) :class:`Tensor` to an
(H, W) :class:`Tensor` in [0, 1] can be registered in its place.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

# sRGB primaries, D65
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)
# reference white as the image of rgb (1, 1, 1), so white maps to L=100, a=b=0 exactly
WHITE = RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0
_DELTA3 = _DELTA**3
CHROMA_LIMIT = 110.0

clamp_events = 0
_clamp_lock = threading.Lock()


def _note_clamped(n: int) -> None:
    global clamp_events
    if n:
        with _clamp_lock:
            clamp_events += n


def _srgb_to_linear(c):
    hi = c > 0.04045
    lin = np.where(hi, ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 2.4, c / 12.92)
    dlin = np.where(hi, (2.4 / 1.055) * ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 1.4, 1.0 / 12.92)
    return lin, dlin


def _linear_to_srgb(lin):
    hi = lin > 0.0031308
    safe = np.maximum(lin, 0.0031308)
    c = np.where(hi, 1.055 * safe ** (1 / 2.4) - 0.055, 12.92 * lin)
    dc_ = np.where(hi, (1.055 / 2.4) * safe ** (1 / 2.4 - 1), 12.92)
    return c, dc_


def _lab_f(t):
    hi = t > _DELTA3
    safe = np.maximum(t, _DELTA3)
    cb = np.cbrt(safe)
    f = np.where(hi, cb, t / (3 * _DELTA**2) + 4.0 / 29.0)
    df = np.where(hi, 1.0 / (3.0 * cb * cb), 1.0 / (3 * _DELTA**2))
    return f, df


def _lab_finv(f):
    hi = f > _DELTA
    t = np.where(hi, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0))
    dt = np.where(hi, 3 * f**2, 3 * _DELTA**2)
    return t, dt


def rgb_to_lab(rgb: Tensor) -> Tensor:
    """(H, W, 3) sRGB in [0, 1] to (H, W, 3) CIELab (D65).

    Inputs outside [0, 1] are clamped (counted in ``clamp_events``) and receive
    zero gradient.
    """
    x = rgb.data
    if x.shape[-1] != 3:
        raise dc.ShapeError(f"rgb_to_lab expects 3 channels, got {x.shape}")
    inside = (x >= 0.0) & (x <= 1.0)
    _note_clamped(int(x.size - np.count_nonzero(inside)))
    c = np.clip(x, 0.0, 1.0)
    lin, dlin = _srgb_to_linear(c)
    t = (lin @ RGB_TO_XYZ.T) / WHITE
    f, df = _lab_f(t)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    out = np.stack([L, a, b], axis=-1)

    def bw(g):
        gf = np.empty_like(g)
        gf[..., 0] = 500.0 * g[..., 1]
        gf[..., 1] = 116.0 * g[..., 0] - 500.0 * g[..., 1] + 200.0 * g[..., 2]
        gf[..., 2] = -200.0 * g[..., 2]
        gxyz = gf * df / WHITE
        glin = gxyz @ RGB_TO_XYZ
        return (glin * dlin * inside,)

    return Tensor.from_op(out, (rgb,), bw, "rgb_to_lab")


def lab_to_rgb(lab: Tensor) -> Tensor:
    """(H, W, 3) CIELab to sRGB. No clamping: out-of-gamut values pass through."""
    y = lab.data
    fy = (y[..., 0] + 16.0) / 116.0
    f = np.stack([fy + y[..., 1] / 500.0, fy, fy - y[..., 2] / 200.0], axis=-1)
    t, dt = _lab_finv(f)
    lin = (t * WHITE) @ XYZ_TO_RGB.T
    c, dc_ = _linear_to_srgb(lin)

    def bw(g):
        glin = g * dc_
        gt = (glin @ XYZ_TO_RGB) * WHITE
        gf = gt * dt
        out = np.empty_like(g)
        out[..., 0] = (gf[..., 0] + gf[..., 1] + gf[..., 2]) / 116.0
        out[..., 1] = gf[..., 0] / 500.0
        out[..., 2] = -gf[..., 2] / 200.0
        return (out,)

    return Tensor.from_op(c, (lab,), bw, "lab_to_rgb")


def opponent_channels(rgb: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Intensity (r+g+b)/3, red-green r-g and blue-yellow b-(r+g)/2 maps."""
    r, g, b = (dc.channel(rgb, i) for i in range(3))
    rg_sum = dc.add(r, g)
    intensity = dc.scale(dc.add(rg_sum, b), 1.0 / 3.0)
    red_green = dc.sub(r, g)
    blue_yellow = dc.sub(b, dc.scale(rg_sum, 0.5))
    return intensity, red_green, blue_yellow


def center_surround(feature: Tensor, center_sigma: float, surround_sigma: float) -> Tensor:
    if not 0 < center_sigma < surround_sigma:
        raise ValueError(
            f"need 0 < center_sigma < surround_sigma, got {center_sigma}, {surround_sigma}"
        )
    return dc.absolute(
        dc.sub(dc.gaussian_blur(feature, center_sigma), dc.gaussian_blur(feature, surround_sigma))
    )


SaliencyBackend = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class ClassicalSaliency:
    """Multi-scale center-surround saliency with a fixed logistic squash.

    ``offset`` and ``softness`` were calibrated once on a 128x128 red disk
    (radius 12.8 px) over mid-gray: mean disk interior 0.729, mean background
    0.018. Keeping the disk just above 0.7 leaves headroom for raising it.
    """

    center_sigma: float = 2.0
    surround_sigma: float = 8.0
    levels: int = 3
    antialias_sigma: float = 1.0
    density_fraction: float = 0.04
    offset: float = 0.095
    softness: float = 0.02
    min_size: int = 32

    def raw(self, image: Tensor) -> Tensor:
        """Unsquashed conspicuity: mean of all upsampled center-surround maps, smoothed."""
        if image.data.ndim != 3 or image.shape[2] != 3:
            raise dc.ShapeError(f"saliency expects an (H, W, 3) image, got {image.shape}")
        h, w = image.shape[:2]
        if min(h, w) < self.min_size:
            raise ValueError(f"image must be at least {self.min_size}px on each side, got {h}x{w}")
        maps = []
        level = image
        for s in range(self.levels):
            if s:
                hs, ws = max(1, h >> s), max(1, w >> s)
                level = dc.resample_bilinear(dc.gaussian_blur(level, self.antialias_sigma), hs, ws)
            intensity, rg, by = opponent_channels(level)
            feats = [
                intensity,
                rg,
                by,
                dc.absolute(dc.spatial_diff(intensity, axis=1)),
                dc.absolute(dc.spatial_diff(intensity, axis=0)),
            ]
            for f in feats:
                cs = center_surround(f, self.center_sigma, self.surround_sigma)
                if s:
                    cs = dc.resample_bilinear(cs, h, w)
                maps.append(cs)
        total = maps[0]
        for m in maps[1:]:
            total = dc.add(total, m)
        total = dc.scale(total, 1.0 / len(maps))
        return dc.gaussian_blur(total, self.density_fraction * min(h, w))

    def __call__(self, image: Tensor) -> Tensor:
        raw = self.raw(image)
        return dc.logistic(dc.scale(dc.add_const(raw, -self.offset), 1.0 / self.softness))


BUILTIN = ClassicalSaliency()


def predict_saliency(image: Tensor) -> Tensor:
    """Saliency map of ``image`` under the built-in model."""
    return BUILTIN(image)


class BackendHandle:
    """Returned by :func:`register_backend`; ``restore()`` reinstates the previous backend."""

    def __init__(self, backend: SaliencyBackend, previous: SaliencyBackend):
        self.backend = backend
        self.previous = previous

    def restore(self) -> None:
        global _active
        with _registry_lock:
            _active = self.previous

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.restore()


_registry_lock = threading.Lock()
_active: SaliencyBackend = BUILTIN


def register_backend(backend: SaliencyBackend) -> BackendHandle:
    global _active
    if not callable(backend):
        raise TypeError("a saliency backend must be callable")
    with _registry_lock:
        previous = _active
        _active = backend
    return BackendHandle(backend, previous)


def get_backend() -> SaliencyBackend:
    return _active


def saliency(image: Tensor, backend: SaliencyBackend | None = None) -> Tensor:
    """Run ``backend`` (default: the registered one) and check the map contract."""
    fn = backend if backend is not None else _active
    out = fn(image)
    if out.shape != image.shape[:2]:
        raise dc.ShapeError(f"backend returned {out.shape}, expected {image.shape[:2]}")
    return out


def saliency_to_uint8(s: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(s, 0.0, 1.0)).astype(np.uint8)
