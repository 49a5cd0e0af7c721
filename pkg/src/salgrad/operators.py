"""Differentiable editing operators and the non-learned surround-color baseline.

Each optimizable operator is bound to one input image and exposes
``forward()`` (the edited image as a graph node), ``parameters()``,
``regularizer()``, ``commit()`` (called after every gradient step),
``snapshot()``/``load()`` for its serializable state and ``reapply(frame)``
to replay the stored edit on another image of the same size.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy import ndimage

from . import colorvision as cv
from . import diffcore as dc
from .diffcore import NonFiniteError, Tensor
from .optim import Adam

log = logging.getLogger(__name__)

DEFAULT_BINS = 16
DEFAULT_SPACING = 16
CONVNET_CHANNELS = (3, 16, 32, 32, 16, 3)
PRETRAIN_ITERS = 50
PRETRAIN_LR = 0.002
NOISE_AMPLITUDE = 0.2

IDENTITY_CELL = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])


def _mask3(mask: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(mask, dtype=np.float64)[..., None], 3, axis=2)


# ---------------------------------------------------------------------------
# recolor


def identity_grid(bins: int = DEFAULT_BINS) -> np.ndarray:
    return np.tile(IDENTITY_CELL, (bins, bins, 1))


def chroma_to_grid(ab: np.ndarray | Tensor, bins: int, limit: float = cv.CHROMA_LIMIT):
    """Map chroma values to fractional grid coordinates in [0, bins - 1]."""
    factor = (bins - 1) / (2.0 * limit)
    if isinstance(ab, Tensor):
        return dc.scale(dc.add_const(ab, limit), factor)
    return (np.asarray(ab, dtype=np.float64) + limit) * factor


def recolor_lookup(theta: np.ndarray, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly blended affine transform for one chroma value: (A 2x2, t 2-vector)."""
    coords = chroma_to_grid(np.array([[[a, b]]]), theta.shape[0])
    cell = dc.grid_sample(dc.const(theta), dc.const(coords)).data[0, 0]
    return cell[:4].reshape(2, 2), cell[4:]


def recolor_transforms(theta: Tensor, ab: Tensor) -> Tensor:
    """Per-pixel 6-vectors looked up from the chroma grid with bilinear weights."""
    return dc.grid_sample(theta, chroma_to_grid(ab, theta.shape[0]))


def recolor_lab(lab: Tensor, theta: Tensor) -> Tensor:
    """Apply (a', b') = (a, b) A + t per pixel; L passes through untouched."""
    L = dc.channel(lab, 0)
    a = dc.channel(lab, 1)
    b = dc.channel(lab, 2)
    T = recolor_transforms(theta, dc.concat([a, b]))
    a2 = dc.add(dc.add(dc.mul(a, dc.channel(T, 0)), dc.mul(b, dc.channel(T, 2))), dc.channel(T, 4))
    b2 = dc.add(dc.add(dc.mul(a, dc.channel(T, 1)), dc.mul(b, dc.channel(T, 3))), dc.channel(T, 5))
    return dc.concat([L, a2, b2])


def recolor_apply(image: Tensor, theta: Tensor) -> Tensor:
    return cv.lab_to_rgb(recolor_lab(cv.rgb_to_lab(image), theta))


# ---------------------------------------------------------------------------
# warp


def control_shape(h: int, w: int, spacing: int = DEFAULT_SPACING) -> tuple[int, int]:
    return (
        max(2, int(math.ceil((h - 1) / spacing)) + 1),
        max(2, int(math.ceil((w - 1) / spacing)) + 1),
    )


def pixel_grid(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([yy, xx], axis=-1)


def warp_densify(control: Tensor, h: int, w: int) -> Tensor:
    """Bilinear (align-corners) upsample of control displacements to (h, w, 2)."""
    return dc.resample_bilinear(control, h, w)


def warp_sample(image: Tensor, dense: Tensor) -> Tensor:
    """Backward warp: output(p) = image(p + dense(p)), clamp-to-edge."""
    h, w = dense.shape[:2]
    return dc.grid_sample(image, dc.add_const(dense, pixel_grid(h, w)))


def warp_commit(current: np.ndarray, control: np.ndarray) -> np.ndarray:
    """Replace the working image with its warp under ``control``."""
    h, w = current.shape[:2]
    return warp_sample(dc.const(current), warp_densify(dc.const(control), h, w)).data


def compose_coords(outer: np.ndarray, control: np.ndarray) -> np.ndarray:
    """Absolute sample map after one more commit: outer(p + dense(p))."""
    h, w = outer.shape[:2]
    dense = warp_densify(dc.const(control), h, w).data
    return dc.grid_sample(dc.const(outer), dc.const(pixel_grid(h, w) + dense)).data


# ---------------------------------------------------------------------------
# convnet


def convnet_init(seed: int = 0, std: float = 0.05, channels=CONVNET_CHANNELS) -> list[Tensor]:
    """Gaussian kernels (std ``std``) plus a unit center tap routing the three
    color channels straight through; zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        k = rng.normal(0.0, std, size=(3, 3, cin, cout))
        for c in range(3):
            k[1, 1, c, c] += 1.0
        params.append(Tensor(k, requires_grad=True))
        params.append(Tensor(np.zeros(cout), requires_grad=True))
    return params


def convnet_forward(image: Tensor, params: list[Tensor]) -> Tensor:
    """Five same-padded 3x3 conv layers; ReLU after the first four, linear output."""
    if len(params) != 10:
        raise ValueError(f"convnet needs 5 (kernel, bias) pairs, got {len(params)} arrays")
    x = image
    for layer in range(5):
        x = dc.conv2d(x, params[2 * layer], params[2 * layer + 1])
        if layer < 4:
            x = dc.relu(x)
    return x


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def convnet_pretrain(
    image: np.ndarray, params: list[Tensor], iters: int = PRETRAIN_ITERS, lr: float = PRETRAIN_LR
) -> list[float]:
    """Fit ``params`` in place to reproduce ``image``; returns the MSE history."""
    x = dc.const(image)
    opt = Adam(params, lr)
    history = []
    for it in range(iters):
        out = convnet_forward(x, params)
        loss = dc.reduce("mean", dc.square(dc.sub(out, x)))
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"convnet pretraining diverged at iteration {it}", iteration=it)
        history.append(value)
        dc.backward(loss)
        opt.step()
    return history


# ---------------------------------------------------------------------------
# noise


def noise_apply(image: Tensor, delta: Tensor, mask: np.ndarray) -> Tensor:
    return dc.add(image, dc.mul(delta, dc.const(_mask3(mask))))


def bounded_noise(theta: Tensor, amplitude: float) -> Tensor:
    """amplitude * tanh(theta), so every entry stays inside (-amplitude, amplitude)."""
    # tanh(x) = 2 * logistic(2x) - 1
    t = dc.add_const(dc.scale(dc.logistic(dc.scale(theta, 2.0)), 2.0), -1.0)
    return dc.scale(t, amplitude)


# ---------------------------------------------------------------------------
# regularizer


def tv_penalty(grid: Tensor) -> Tensor:
    """Sum of absolute forward differences along the two grid axes."""
    g = grid.data
    if g.shape[0] < 2 or g.shape[1] < 2:
        raise ValueError(f"tv_penalty needs at least 2 cells per axis, got {g.shape}")
    d0 = np.diff(g, axis=0)
    d1 = np.diff(g, axis=1)
    value = np.asarray(np.abs(d0).sum() + np.abs(d1).sum())
    s0, s1 = np.sign(d0), np.sign(d1)

    def bw(up):
        out = np.zeros_like(g)
        out[1:] += s0
        out[:-1] -= s0
        out[:, 1:] += s1
        out[:, :-1] -= s1
        return (out * float(up),)

    return Tensor.from_op(value, (grid,), bw, "tv")


# ---------------------------------------------------------------------------
# baseline


def _ring(mask: np.ndarray, width: int) -> np.ndarray:
    inside = mask > 0.5
    dist = ndimage.distance_transform_edt(~inside)
    return (dist <= width) & ~inside


def baseline_surround_lab(
    image: np.ndarray, mask: np.ndarray, ring_width: int = 8, bin_size: float = 10.0
) -> np.ndarray:
    """Lab image with in-mask chroma set to the surround's histogram mode and
    in-mask lightness shifted to the surround's mean."""
    inside = np.asarray(mask) > 0.5
    if not inside.any():
        raise ValueError("baseline needs a nonempty mask")
    ring = _ring(mask, ring_width)
    if not ring.any():
        raise ValueError("baseline surround ring is empty")
    lab = cv.rgb_to_lab(dc.const(image)).data.copy()
    lim = cv.CHROMA_LIMIT
    edges = np.arange(-lim, lim + bin_size / 2, bin_size)
    ab = np.clip(lab[ring][:, 1:], -lim, lim)
    hist, _, _ = np.histogram2d(ab[:, 0], ab[:, 1], bins=[edges, edges])
    ia, ib = np.unravel_index(int(np.argmax(hist)), hist.shape)
    centers = (edges[:-1] + edges[1:]) / 2
    lab[inside, 1] = centers[ia]
    lab[inside, 2] = centers[ib]
    lab[inside, 0] += lab[ring, 0].mean() - lab[inside, 0].mean()
    return lab


def baseline_surround_recolor(image: np.ndarray, mask: np.ndarray, ring_width: int = 8) -> np.ndarray:
    return cv.lab_to_rgb(dc.const(baseline_surround_lab(image, mask, ring_width))).data


# ---------------------------------------------------------------------------
# bound operators


class RecolorOperator:
    tag = "recolor"
    regularized = True

    def __init__(self, image: np.ndarray, mask: np.ndarray, bins: int = DEFAULT_BINS, **_):
        self.image = dc.const(image)
        self.theta = Tensor(identity_grid(bins), requires_grad=True)

    def parameters(self):
        return [self.theta]

    def forward(self) -> Tensor:
        return recolor_apply(self.image, self.theta)

    def regularizer(self):
        return tv_penalty(self.theta)

    def commit(self):
        pass

    def snapshot(self) -> list[np.ndarray]:
        return [self.theta.data.copy()]

    def load(self, arrays):
        (self.theta.data,) = [np.array(a, dtype=np.float64) for a in arrays]

    @staticmethod
    def reapply(frame: np.ndarray, arrays) -> np.ndarray:
        return recolor_apply(dc.const(frame), dc.const(arrays[0])).data


class WarpOperator:
    """Incremental warp: every commit bakes the step into the working image
    and resets the control displacements to zero.

    The working image is always the original sampled once at the composed
    coordinate map, so interpolation blur does not compound across commits
    and the stored map replays the result exactly.
    """

    tag = "warp"
    regularized = True

    def __init__(self, image: np.ndarray, mask: np.ndarray, spacing: int = DEFAULT_SPACING, **_):
        h, w = image.shape[:2]
        self.original = np.array(image, dtype=np.float64)
        self.current = self.original.copy()
        self.coords = pixel_grid(h, w)
        self.control = Tensor(np.zeros(control_shape(h, w, spacing) + (2,)), requires_grad=True)

    def parameters(self):
        return [self.control]

    def forward(self) -> Tensor:
        h, w = self.current.shape[:2]
        return warp_sample(dc.const(self.current), warp_densify(self.control, h, w))

    def regularizer(self):
        return tv_penalty(self.control)

    def commit(self):
        self.coords = compose_coords(self.coords, self.control.data)
        self.current = self.reapply(self.original, [self.coords])
        self.control.data = np.zeros_like(self.control.data)

    def snapshot(self) -> list[np.ndarray]:
        return [self.coords.copy(), self.current.copy()]

    def load(self, arrays):
        self.coords = np.array(arrays[0], dtype=np.float64)
        if len(arrays) > 1:
            self.current = np.array(arrays[1], dtype=np.float64)
        self.control.data = np.zeros_like(self.control.data)

    @staticmethod
    def reapply(frame: np.ndarray, arrays) -> np.ndarray:
        return dc.grid_sample(dc.const(frame), dc.const(arrays[0])).data


class ConvNetOperator:
    tag = "convnet"
    regularized = False

    def __init__(
        self,
        image: np.ndarray,
        mask: np.ndarray,
        seed: int = 0,
        pretrain_iters: int = PRETRAIN_ITERS,
        pretrain_lr: float = PRETRAIN_LR,
        **_,
    ):
        self.image = dc.const(image)
        self.params = convnet_init(seed)
        self.pretrain_iters = pretrain_iters
        self.pretrain_lr = pretrain_lr
        self.pretrain_history: list[float] = []

    def prepare(self):
        self.pretrain_history = convnet_pretrain(
            self.image.data, self.params, self.pretrain_iters, self.pretrain_lr
        )

    def parameters(self):
        return list(self.params)

    def forward(self) -> Tensor:
        return convnet_forward(self.image, self.params)

    def regularizer(self):
        return None

    def commit(self):
        pass

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load(self, arrays):
        for p, a in zip(self.params, arrays):
            p.data = np.array(a, dtype=np.float64)

    @staticmethod
    def reapply(frame: np.ndarray, arrays) -> np.ndarray:
        return convnet_forward(dc.const(frame), [dc.const(a) for a in arrays]).data


class NoiseOperator:
    tag = "noise"
    regularized = False

    def __init__(self, image: np.ndarray, mask: np.ndarray, amplitude: float = NOISE_AMPLITUDE, **_):
        if not amplitude > 0:
            raise ValueError(f"noise amplitude must be positive, got {amplitude}")
        self.image = dc.const(image)
        self.mask = np.asarray(mask, dtype=np.float64)
        self.amplitude = float(amplitude)
        self.delta = Tensor(np.zeros(image.shape), requires_grad=True)

    def parameters(self):
        return [self.delta]

    def noise(self) -> Tensor:
        return bounded_noise(self.delta, self.amplitude)

    def forward(self) -> Tensor:
        return noise_apply(self.image, self.noise(), self.mask)

    def regularizer(self):
        return None

    def commit(self):
        pass

    def snapshot(self) -> list[np.ndarray]:
        # stored already masked so replay needs no mask
        return [self.noise().data * _mask3(self.mask)]

    def load(self, arrays):
        ratio = np.asarray(arrays[0], dtype=np.float64) / self.amplitude
        self.delta.data = np.arctanh(np.clip(ratio, -1 + 1e-12, 1 - 1e-12))

    @staticmethod
    def reapply(frame: np.ndarray, arrays) -> np.ndarray:
        return frame + arrays[0]


OPERATORS = {
    cls.tag: cls for cls in (RecolorOperator, WarpOperator, ConvNetOperator, NoiseOperator)
}


def make_operator(tag: str, image: np.ndarray, mask: np.ndarray, **options):
    try:
        cls = OPERATORS[tag]
    except KeyError:
        raise ValueError(f"unknown operator {tag!r}; expected one of {sorted(OPERATORS)}") from None
    return cls(image, mask, **options)


def reapply(tag: str, frame: np.ndarray, arrays) -> np.ndarray:
    if tag == "baseline":
        raise ValueError("the baseline has no stored parameters to replay")
    return OPERATORS[tag].reapply(np.asarray(frame, dtype=np.float64), arrays)
