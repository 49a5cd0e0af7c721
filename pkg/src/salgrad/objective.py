"""Masked saliency loss, out-of-mask similarity loss and the Adam loop.

The squared norms are taken as means over pixels (and channels) so the default
weights carry over between image sizes.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import colorvision as cv
from . import diffcore as dc
from . import operators as ops
from .diffcore import NonFiniteError, Tensor
from .optim import Adam, AdamState, adam_step

__all__ = [
    "TargetMap",
    "RunConfig",
    "TraceRow",
    "Trace",
    "OptimizeResult",
    "loss_sal",
    "loss_sim",
    "total_objective",
    "adam_step",
    "AdamState",
    "optimize",
    "mask_mean",
    "DEFAULT_BETA",
    "DEFAULT_LR",
]

log = logging.getLogger(__name__)

DEFAULT_LR = {"recolor": 0.02, "warp": 0.02, "noise": 0.02, "convnet": 0.001}
# the warp cannot avoid shifting background texture next to the region, so
# it needs a looser similarity weight to move at all
DEFAULT_BETA = {"recolor": 10.0, "warp": 1.0, "noise": 10.0, "convnet": 10.0}


@dataclass(frozen=True)
class TargetMap:
    """Desired saliency: a constant in [0, 1] or a full map."""

    value: float = 0.0
    map: np.ndarray | None = None

    @classmethod
    def constant(cls, value: float) -> "TargetMap":
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"target value must lie in [0, 1], got {value}")
        return cls(value=float(value))

    @classmethod
    def from_map(cls, values: np.ndarray) -> "TargetMap":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.min() < 0 or values.max() > 1:
            raise ValueError("target map must be an (H, W) array in [0, 1]")
        return cls(map=values)

    def resolve(self, shape: tuple[int, int]) -> np.ndarray:
        if self.map is None:
            return np.full(shape, self.value)
        if self.map.shape != tuple(shape):
            raise dc.ShapeError(f"target map {self.map.shape} vs image {shape}")
        return self.map


@dataclass(frozen=True)
class RunConfig:
    beta: float | None = None
    gamma: float = 0.1
    lr: float | None = None
    iters: int = 500
    seed: int = 0
    operator: str = "recolor"
    target: TargetMap = field(default_factory=TargetMap)
    bins: int = ops.DEFAULT_BINS
    spacing: int = ops.DEFAULT_SPACING
    pretrain_iters: int = ops.PRETRAIN_ITERS
    pretrain_lr: float = ops.PRETRAIN_LR
    noise_amplitude: float = ops.NOISE_AMPLITUDE

    def __post_init__(self):
        # NaN weights are let through on purpose: they surface as a runtime abort
        if (self.beta is not None and self.beta < 0) or self.gamma < 0:
            raise ValueError("beta and gamma must be nonnegative")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def similarity_weight(self) -> float:
        return self.beta if self.beta is not None else DEFAULT_BETA.get(self.operator, 10.0)

    @property
    def step_size(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR.get(self.operator, 0.02)

    def with_operator(self, tag: str) -> "RunConfig":
        return replace(self, operator=tag)


def mask_mean(values: np.ndarray, mask: np.ndarray) -> float:
    return float((values * mask).sum() / mask.sum())


def loss_sal(saliency: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """mean over pixels of (M * (S - T))^2."""
    mask = np.asarray(mask, dtype=np.float64)
    resid = dc.add_const(saliency, -np.asarray(target, dtype=np.float64))
    total = dc.reduce("sum", dc.square(resid), weights=mask * mask)
    return dc.scale(total, 1.0 / mask.size)


def loss_sim(edited: Tensor, original: np.ndarray, mask: np.ndarray) -> Tensor:
    """mean over pixels and channels of ((1 - M) * (edited - original))^2."""
    keep = 1.0 - np.asarray(mask, dtype=np.float64)
    w = np.repeat((keep * keep)[..., None], edited.shape[2], axis=2)
    total = dc.reduce("sum", dc.square(dc.add_const(edited, -original)), weights=w)
    return dc.scale(total, 1.0 / w.size)


@dataclass
class Evaluation:
    total: Tensor
    sal: Tensor
    sim: Tensor
    tv: Tensor | None
    edited: Tensor
    saliency: Tensor


def total_objective(
    operator,
    original: np.ndarray,
    mask: np.ndarray,
    config: RunConfig,
    backend=None,
) -> Evaluation:
    """L_sal + beta * L_sim + gamma * TV(theta) / |theta| at the current parameters.

    The TV sum is divided by the parameter count so ``gamma`` does not depend
    on the grid resolution.
    """
    edited = operator.forward()
    sal_map = cv.saliency(edited, backend)
    target = config.target.resolve(mask.shape)
    ls = loss_sal(sal_map, target, mask)
    lm = loss_sim(edited, original, mask)
    total = dc.add(ls, dc.scale(lm, config.similarity_weight))
    tv = operator.regularizer() if operator.regularized else None
    if tv is not None:
        # per-entry mean, like the two image norms
        n = sum(p.data.size for p in operator.parameters())
        total = dc.add(total, dc.scale(tv, config.gamma / n))
    return Evaluation(total, ls, lm, tv, edited, sal_map)


@dataclass(frozen=True)
class TraceRow:
    iter: int
    loss_sal: float
    loss_sim: float
    tv: float
    total: float
    mask_mean_saliency: float


TRACE_HEADER = ("iter", "loss_sal", "loss_sim", "tv", "total", "mask_mean_saliency")


@dataclass
class Trace:
    rows: list[TraceRow] = field(default_factory=list)
    best_index: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i) -> TraceRow:
        return self.rows[i]

    @property
    def best(self) -> TraceRow:
        return self.rows[self.best_index]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(TRACE_HEADER) + "\n")
        for r in self.rows:
            out.write(
                f"{r.iter},{r.loss_sal:.17g},{r.loss_sim:.17g},{r.tv:.17g},"
                f"{r.total:.17g},{r.mask_mean_saliency:.17g}\n"
            )
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trace":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if tuple(lines[0].split(",")) != TRACE_HEADER:
            raise ValueError("not a trace table")
        rows = []
        for ln in lines[1:]:
            f = ln.split(",")
            rows.append(TraceRow(int(f[0]), *map(float, f[1:])))
        trace = cls(rows)
        trace.best_index = int(np.argmin(trace.column("total"))) if rows else 0
        return trace


@dataclass
class OptimizeResult:
    image: np.ndarray
    params: list[np.ndarray]
    trace: Trace
    operator: object = None
    aborted: str | None = None

    def __iter__(self):
        return iter((self.image, self.params, self.trace))


def optimize(
    image: np.ndarray,
    mask: np.ndarray,
    operator: str,
    config: RunConfig | None = None,
    backend=None,
) -> OptimizeResult:
    """Minimize the objective over the operator's parameters with Adam.

    Returns the iterate with the lowest total objective. A non-finite loss or
    gradient stops the run early; the best-so-far result is returned with
    ``aborted`` set.
    """
    config = (config or RunConfig()).with_operator(operator)
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.ndim != 3 or image.shape[:2] != mask.shape:
        raise dc.ShapeError(f"image {image.shape} and mask {mask.shape} disagree")
    if not (mask > 0).any():
        raise ValueError("mask is empty")

    op = ops.make_operator(
        operator,
        image,
        mask,
        bins=config.bins,
        spacing=config.spacing,
        seed=config.seed,
        pretrain_iters=config.pretrain_iters,
        pretrain_lr=config.pretrain_lr,
        amplitude=config.noise_amplitude,
    )
    trace = Trace()

    if config.iters == 0:
        sal = cv.saliency(dc.const(image), backend)
        ls = loss_sal(sal, config.target.resolve(mask.shape), mask).item()
        trace.rows.append(TraceRow(0, ls, 0.0, 0.0, ls, mask_mean(sal.data, mask)))
        return OptimizeResult(image.copy(), op.snapshot(), trace, op)

    if hasattr(op, "prepare"):
        op.prepare()

    opt = Adam(op.parameters(), config.step_size)
    best_total = math.inf
    best_image = image.copy()
    best_params = op.snapshot()
    aborted = None
    for k in range(config.iters + 1):
        ev = total_objective(op, image, mask, config, backend)
        total = ev.total.item()
        if not math.isfinite(total):
            aborted = f"non-finite objective at iteration {k}"
            break
        row = TraceRow(
            k,
            ev.sal.item(),
            ev.sim.item(),
            ev.tv.item() if ev.tv is not None else 0.0,
            total,
            mask_mean(ev.saliency.data, mask),
        )
        trace.rows.append(row)
        if total < best_total:
            best_total = total
            best_image = ev.edited.data.copy()
            best_params = op.snapshot()
            trace.best_index = len(trace.rows) - 1
        if k == config.iters:
            break
        try:
            dc.backward(ev.total)
            opt.step()
        except NonFiniteError as err:
            aborted = f"{err} (iteration {k})"
            break
        op.commit()
    if aborted:
        log.warning("optimization aborted: %s", aborted)
    op.load(best_params)
    return OptimizeResult(best_image, best_params, trace, op, aborted)
