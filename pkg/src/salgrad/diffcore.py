"""Reverse-mode automatic differentiation over image-shaped float64 arrays.

Every editing operator, the saliency model and the loss terms are composed from
the primitives in this module, so a single call to :func:`backward` yields the
gradient of the objective with respect to all operator parameters.

Spatial primitives accept ``(H, W)`` maps or ``(H, W, C)`` images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "const",
    "pointwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "square",
    "absolute",
    "logistic",
    "add_const",
    "reduce",
    "conv2d",
    "gaussian_kernel",
    "gaussian_blur",
    "resample_bilinear",
    "bilinear_weights",
    "grid_sample",
    "spatial_diff",
    "channel",
    "concat",
    "tile_channels",
    "backward",
    "gradcheck",
    "GradcheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a graph contains NaN/Inf values or gradients."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array with an optional gradient slot and the node that made it."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: BackwardFn,
        op: str,
    ) -> "Tensor":
        """Record a primitive application. ``backward_fn`` maps the upstream
        gradient to one gradient (or None) per parent."""
        parents = tuple(parents)
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return cls(data, op=op)
        return cls(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    def __radd__(self, other):
        return add(_wrap(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other, self.shape))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def const(data) -> Tensor:
    """A tensor that never receives a gradient."""
    return Tensor(np.asarray(data, dtype=np.float64))


def _same_shape(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# pointwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_const(a: Tensor, c) -> Tensor:
    """``a + c`` for a non-differentiable constant ``c`` (scalar or broadcastable)."""
    return Tensor.from_op(a.data + c, (a,), lambda g: (g,), "add_const")


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    on = a.data > 0
    return Tensor.from_op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def logistic(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "logistic")


_POINTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "square": square,
    "abs": absolute,
}


def pointwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, square, abs."""
    if kind == "scale":
        if b is None:
            raise TypeError("scale needs a factor")
        return scale(a, float(b))
    fn = _POINTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    if kind in ("add", "sub", "mul"):
        if not isinstance(b, Tensor):
            raise TypeError(f"{kind} needs two tensors")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# reductions


def reduce(kind: str, x: Tensor, weights=None) -> Tensor:
    """Weighted sum or mean to a scalar.

    The weighted mean divides by ``sum(weights)``; the unweighted mean by the
    element count.
    """
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if weights is None:
        w = None
        total = x.data.sum()
        denom = float(x.data.size)
    else:
        w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape:
            raise ShapeError(f"reduce: weights shape {w.shape} vs input {x.shape}")
        total = (w * x.data).sum()
        denom = float(w.sum())
    if kind == "sum":
        factor = 1.0
    else:
        if denom == 0.0:
            raise ZeroDivisionError("weighted mean with zero total weight")
        factor = 1.0 / denom
    value = np.asarray(total * factor)
    shape = x.shape

    def bw(g):
        gs = float(g) * factor
        if w is None:
            return (np.full(shape, gs),)
        return (w * gs,)

    return Tensor.from_op(value, (x,), bw, f"reduce_{kind}")


# ---------------------------------------------------------------------------
# structural


def channel(x: Tensor, index: int) -> Tensor:
    """Select one channel of an (H, W, C) tensor as an (H, W) map."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[..., index] = g
        return (out,)

    return Tensor.from_op(x.data[..., index].copy(), (x,), bw, "channel")


def concat(maps: Sequence[Tensor]) -> Tensor:
    """Stack (H, W) maps or concatenate (H, W, C) tensors along the channel axis."""
    datas = [m.data if m.data.ndim == 3 else m.data[..., None] for m in maps]
    hw = datas[0].shape[:2]
    for d in datas:
        if d.shape[:2] != hw:
            raise ShapeError(f"concat: spatial mismatch {d.shape[:2]} vs {hw}")
    sizes = [d.shape[2] for d in datas]
    flat = [m.data.ndim == 2 for m in maps]
    out = np.concatenate(datas, axis=2)

    def bw(g):
        grads = []
        start = 0
        for n, is2d in zip(sizes, flat):
            piece = g[..., start : start + n]
            grads.append(piece[..., 0] if is2d else piece)
            start += n
        return grads

    return Tensor.from_op(out, maps, bw, "concat")


def tile_channels(x: Tensor, channels: int) -> Tensor:
    """Repeat an (H, W) map into an (H, W, channels) tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"tile_channels expects an (H, W) map, got {x.shape}")
    out = np.repeat(x.data[..., None], channels, axis=2)
    return Tensor.from_op(out, (x,), lambda g: (g.sum(axis=2),), "tile")


# ---------------------------------------------------------------------------
# separable linear maps (blur, resample)


def _as_chw(a: np.ndarray) -> tuple[np.ndarray, bool]:
    if a.ndim == 2:
        return a[None], True
    if a.ndim == 3:
        return a.transpose(2, 0, 1), False
    raise ShapeError(f"expected (H, W) or (H, W, C), got {a.shape}")


def _from_chw(a: np.ndarray, was2d: bool) -> np.ndarray:
    return a[0] if was2d else np.ascontiguousarray(a.transpose(1, 2, 0))


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str) -> Tensor:
    """y = rows @ x @ cols.T applied per channel."""
    xc, was2d = _as_chw(x.data)
    out = _from_chw(rows @ xc @ cols.T, was2d)

    def bw(g):
        gc, _ = _as_chw(g)
        return (_from_chw(rows.T @ gc @ cols, was2d),)

    return Tensor.from_op(out, (x,), bw, op)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at radius ceil(3 sigma), normalized to sum 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (d / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=256)
def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    radius = (len(k) - 1) // 2
    m = np.zeros((n, n))
    rows = np.arange(n)
    for off, wk in zip(range(-radius, radius + 1), k):
        # clamp-to-edge
        np.add.at(m, (rows, np.clip(rows + off, 0, n - 1)), wk)
    m.setflags(write=False)
    return m


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur with clamp-to-edge boundaries."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = x.shape[:2]
    return _separable(x, _blur_matrix(h, float(sigma)), _blur_matrix(w, float(sigma)), "blur")


@lru_cache(maxsize=256)
def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(src).astype(int), 0, max(n_in - 2, 0))
    f = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    m.setflags(write=False)
    return m


def resample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with the align-corners convention."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {(out_h, out_w)}")
    h, w = x.shape[:2]
    return _separable(x, _resample_matrix(h, out_h), _resample_matrix(w, out_w), "resample")


def spatial_diff(x: Tensor, axis: int) -> Tensor:
    """Central first difference along a spatial axis, clamp-to-edge (one-sided at borders)."""
    n = x.shape[axis]
    m = np.zeros((n, n))
    idx = np.arange(n)
    np.add.at(m, (idx, np.minimum(idx + 1, n - 1)), 0.5)
    np.add.at(m, (idx, np.maximum(idx - 1, 0)), -0.5)
    eye_other = np.eye(x.shape[1 - axis])
    if axis == 0:
        return _separable(x, m, eye_other, "diff")
    return _separable(x, eye_other, m, "diff")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded (zeros), stride-1 cross-correlation.

    x: (H, W, Cin); kernels: (k, k, Cin, Cout); bias: (Cout,).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be (H, W, C), got {x.shape}")
    k, k2, cin, cout = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernels must be odd and square, got {kernels.shape}")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[2]}, kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))  # H, W, Cin, k, k
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, k * k * cin)
    kmat = kernels.data.reshape(k * k * cin, cout)
    out = (cols @ kmat + bias.data).reshape(h, w, cout)

    def bw(g):
        g2 = g.reshape(h * w, cout)
        gk = (cols.T @ g2).reshape(k, k, cin, cout)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(h, w, k, k, cin)
            gxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gxp[u : u + h, v : v + w] += dcols[:, :, u, v]
            gx = gxp[p : p + h, p : p + w]
        return (gx, gk, gb)

    return Tensor.from_op(out, (x, kernels, bias), bw, "conv2d")


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_weights(coords: np.ndarray, size: tuple[int, int]):
    """Corner indices and weights for sampling an (H, W) grid at ``coords`` (..., 2).

    Coordinates are clamped to the valid rectangle. Returns
    ``(y0, y1, x0, x1, weights)`` where ``weights[..., k]`` pairs with corners
    (y0,x0), (y1,x0), (y0,x1), (y1,x1); the four weights sum to 1.
    """
    h, w = size
    y = np.clip(coords[..., 0], 0.0, h - 1)
    x = np.clip(coords[..., 1], 0.0, w - 1)
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    weights = np.stack(
        [(1 - fy) * (1 - fx), fy * (1 - fx), (1 - fy) * fx, fy * fx], axis=-1
    )
    return y0, y1, x0, x1, weights


def _scatter(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    c = vals.shape[-1]
    out = np.empty((n, c))
    flat_idx = idx.ravel()
    v = vals.reshape(-1, c)
    for ch in range(c):
        out[:, ch] = np.bincount(flat_idx, weights=v[:, ch], minlength=n)
    return out


def grid_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample ``x`` (H, W[, C]) at pixel coordinates ``coords`` (Ho, Wo, 2).

    Channel 0 of ``coords`` is the row, channel 1 the column. Out-of-range
    coordinates are clamped to the image (zero gradient in the clamped
    direction). At exactly integer interior coordinates the coordinate gradient
    is the central slope, a valid subgradient of the piecewise-linear
    interpolant.
    """
    if coords.data.ndim != 3 or coords.shape[2] != 2:
        raise ShapeError(f"coords must be (H, W, 2), got {coords.shape}")
    xd = x.data
    was2d = xd.ndim == 2
    img = xd[..., None] if was2d else xd
    h, w, c = img.shape
    cd = coords.data
    y0, y1, x0, x1, wts = bilinear_weights(cd, (h, w))
    i00, i10, i01, i11 = img[y0, x0], img[y1, x0], img[y0, x1], img[y1, x1]
    out = (
        wts[..., 0:1] * i00 + wts[..., 1:2] * i10 + wts[..., 2:3] * i01 + wts[..., 3:4] * i11
    )

    def bw(g):
        g3 = g[..., None] if was2d else g
        gx = None
        if x.requires_grad:
            n = h * w
            gx = np.zeros((n, c))
            for k, (yy, xx) in enumerate(((y0, x0), (y1, x0), (y0, x1), (y1, x1))):
                gx += _scatter(yy * w + xx, g3 * wts[..., k : k + 1], n)
            gx = gx.reshape(h, w, c)
            if was2d:
                gx = gx[..., 0]
        gc = None
        if coords.requires_grad:
            gc = _coord_grad(img, cd, g3, y0, y1, x0, x1, wts)
        return (gx, gc)

    result = out[..., 0] if was2d else out
    return Tensor.from_op(result, (x, coords), bw, "grid_sample")


def _coord_grad(img, cd, g3, y0, y1, x0, x1, wts):
    h, w, _ = img.shape
    y = cd[..., 0]
    xq = cd[..., 1]
    fy = (wts[..., 1] + wts[..., 3])[..., None]
    fx = (wts[..., 2] + wts[..., 3])[..., None]
    row_lo = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
    row_hi = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
    col_lo = (1 - fy) * img[y0, x0] + fy * img[y1, x0]
    col_hi = (1 - fy) * img[y0, x1] + fy * img[y1, x1]
    dy = row_hi - row_lo
    dx = col_hi - col_lo

    # central slope at integer interior coordinates
    ky = (y == np.floor(y)) & (y > 0) & (y < h - 1)
    if ky.any():
        yi = y.astype(np.intp)
        ym, yp = np.clip(yi - 1, 0, h - 1), np.clip(yi + 1, 0, h - 1)
        up = (1 - fx) * img[yp, x0] + fx * img[yp, x1]
        dn = (1 - fx) * img[ym, x0] + fx * img[ym, x1]
        dy = np.where(ky[..., None], 0.5 * (up - dn), dy)
    kx = (xq == np.floor(xq)) & (xq > 0) & (xq < w - 1)
    if kx.any():
        xi = xq.astype(np.intp)
        xm, xp_ = np.clip(xi - 1, 0, w - 1), np.clip(xi + 1, 0, w - 1)
        rt = (1 - fy) * img[y0, xp_] + fy * img[y1, xp_]
        lt = (1 - fy) * img[y0, xm] + fy * img[y1, xm]
        dx = np.where(kx[..., None], 0.5 * (rt - lt), dx)

    in_y = ((y >= 0) & (y <= h - 1) & (h > 1)).astype(np.float64)
    in_x = ((xq >= 0) & (xq <= w - 1) & (w > 1)).astype(np.float64)
    gy = (g3 * dy).sum(axis=-1) * in_y
    gx = (g3 * dx).sum(axis=-1) * in_x
    return np.stack([gy, gx], axis=-1)


# ---------------------------------------------------------------------------
# graph and backward


@dataclass
class Graph:
    """Topologically ordered primitive applications leading to an output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            if not np.all(np.isfinite(node.data)):
                raise NonFiniteError(f"non-finite values in graph at node {node.op!r}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if g is None:
                continue
            if node.is_leaf:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
        for node in self.nodes:
            if node.is_leaf and node.requires_grad:
                node.grad = grads.get(id(node), np.zeros_like(node.data))
        return grads


def backward(loss: Tensor) -> Graph:
    """Seed d(loss)=1 and write accumulated gradients into every leaf that requires them."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    graph.backward(loss)
    return graph


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    errors: list[float]
    tolerance: float
    checked: list[int]
    refined: list[int] = field(default_factory=list)
    kinks: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e <= self.tolerance for e in self.errors)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def kink_fraction(self) -> float:
        total = sum(self.checked)
        return sum(self.kinks) / total if total else 0.0

    def __str__(self) -> str:
        parts = ", ".join(f"{e:.2e}" for e in self.errors)
        return (
            f"gradcheck {'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:.0e}): [{parts}]"
            f" checked={self.checked} refined={self.refined} kinks={self.kinks}"
        )


def _central(build, flat, idx, h):
    orig = flat[idx]
    flat[idx] = orig + h
    fp = float(build().data)
    flat[idx] = orig - h
    fm = float(build().data)
    flat[idx] = orig
    # rounding error of the difference quotient itself
    noise = 4.0 * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / h
    return (fp - fm) / (2 * h), noise


def gradcheck(
    build: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-4,
    samples: int | None = None,
    seed: int = 0,
    skip: Sequence[np.ndarray | None] | None = None,
) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    ``build`` must rebuild the scalar output from the current data of
    ``tensors``. Each entry's error is ``|a - n| / max(|a|, |n|, floor)``
    where the floor is the larger of ``1e-3`` times the largest numeric
    gradient over all tensors and the difference quotient's own rounding
    noise divided by ``tolerance``.

    Piecewise-smooth functions (ReLU, clamped or bilinear sampling) have
    kinks; a stencil of width ``2h`` that straddles one gives a difference
    quotient that is not a derivative. An entry that fails at ``h`` is
    retried at ``h/10`` and ``h/100``. If a finer stencil agrees with the
    analytic value the entry passes and is counted in ``refined``. If the
    quotients disagree with each other too, the stencil is non-smooth and
    the entry is counted in ``kinks`` and left out. Quotients that agree
    with each other but not with the analytic gradient are a failure.
    ``samples`` limits the number of randomly chosen entries per tensor;
    ``skip`` masks entries excluded by design.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = build()
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    rng = np.random.default_rng(seed)

    picks, numeric = [], []
    for ti, t in enumerate(tensors):
        candidates = np.arange(t.data.size)
        if skip is not None and skip[ti] is not None:
            candidates = candidates[~np.asarray(skip[ti], dtype=bool).ravel()]
        if samples is not None and candidates.size > samples:
            candidates = rng.choice(candidates, size=samples, replace=False)
        flat = t.data.reshape(-1)
        picks.append(candidates)
        numeric.append([_central(build, flat, idx, h) for idx in candidates])

    scale = max((abs(n) for col in numeric for n, _ in col), default=0.0)
    errors, checked, refined, kinks = [], [], [], []
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        ana = analytic[ti].reshape(-1)
        worst, n_refined, n_kinks = 0.0, 0, 0
        for idx, (num, noise) in zip(picks[ti], numeric[ti]):
            a = ana[idx]

            def err(n, nz):
                denom = max(abs(a), abs(n), 1e-3 * scale, nz / tolerance, 1e-300)
                return abs(a - n) / denom

            if not (np.isfinite(num) and np.isfinite(a)):
                worst = float("inf")
                continue
            e = err(num, noise)
            if e > tolerance:
                finer = [_central(build, flat, idx, h * f) for f in (0.1, 0.01)]
                fine_errors = [err(n, nz) for n, nz in finer]
                if min(fine_errors) <= tolerance:
                    n_refined += 1
                    e = min(fine_errors)
                else:
                    quotients = [num] + [n for n, _ in finer]
                    spread = max(quotients) - min(quotients)
                    if spread > tolerance * max(abs(num), 1e-3 * scale):
                        n_kinks += 1
                        continue
            worst = max(worst, e)
        errors.append(float(worst))
        checked.append(int(picks[ti].size))
        refined.append(n_refined)
        kinks.append(n_kinks)
    return GradcheckReport(errors, tolerance, checked, refined, kinks)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
