"""Automatic distractor editing: segment salient regions, pick the best
operator per region, replay the chosen edits on a sequence of frames."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import colorvision as cv
from . import diffcore as dc
from . import operators as ops
from .objective import OptimizeResult, RunConfig, Trace, optimize
from .sgop import PlanRecord

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.15
DEFAULT_CANDIDATES = ("warp", "recolor", "convnet")
SUBJECT_AREA_FRACTION = 0.25

# 4-connectivity
_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class DistractorRegion:
    mask: np.ndarray
    bbox: tuple[int, int, int, int]  # top, left, height, width
    peak_saliency: float


@dataclass
class RegionEditPlan:
    region: DistractorRegion
    operator: str
    params: list[np.ndarray]
    achieved_saliency: float
    traces: dict[str, Trace] = field(default_factory=dict)

    def to_record(self) -> PlanRecord:
        r = self.region
        return PlanRecord(r.bbox, r.peak_saliency, self.achieved_saliency, self.operator, self.params, r.mask)

    @classmethod
    def from_record(cls, rec: PlanRecord) -> "RegionEditPlan":
        region = DistractorRegion(rec.mask, tuple(rec.bbox), rec.peak_saliency)
        return cls(region, rec.tag, rec.params, rec.achieved_saliency)


class SelectionError(RuntimeError):
    """Every candidate operator aborted; carries all traces."""

    def __init__(self, message: str, traces: dict[str, Trace]):
        super().__init__(message)
        self.traces = traces


def segment_distractors(
    saliency: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    protect: np.ndarray | None = None,
) -> list[DistractorRegion]:
    """4-connected components of ``saliency > threshold`` outside ``protect``.

    Components covering 25% of the image or more are taken to be the subject
    and skipped. Sorted by descending peak saliency.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    s = np.asarray(saliency, dtype=np.float64)
    on = s > threshold
    if protect is not None:
        on &= ~(np.asarray(protect) > 0.5)
    labels, n = ndimage.label(on, structure=_FOUR)
    cap = SUBJECT_AREA_FRACTION * s.size
    regions = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels == idx
        if comp.sum() >= cap:
            continue
        bbox = (sl[0].start, sl[1].start, sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)
        regions.append(DistractorRegion(comp.astype(np.float64), bbox, float(s[comp].max())))
    regions.sort(key=lambda r: -r.peak_saliency)
    return regions


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("SALGRAD_THREADS", "1")))
    except ValueError:
        return 1


def select_operator(
    image: np.ndarray,
    region: DistractorRegion,
    candidates: Sequence[str] = DEFAULT_CANDIDATES,
    config: RunConfig | None = None,
    backend=None,
) -> RegionEditPlan:
    """Optimize every candidate on the region and keep the one with the lowest
    in-region saliency at its returned iterate. Ties go to the earlier candidate."""
    if not candidates:
        raise ValueError("need at least one candidate operator")
    config = config or RunConfig()

    def run(tag: str) -> OptimizeResult:
        return optimize(image, region.mask, tag, config, backend)

    workers = min(_thread_cap(), len(candidates))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, candidates))
    else:
        results = [run(t) for t in candidates]

    traces = {}
    best = None
    for i, (tag, res) in enumerate(zip(candidates, results)):
        traces[f"{i}:{tag}"] = res.trace
        if res.aborted or not len(res.trace):
            log.info("candidate %s aborted: %s", tag, res.aborted)
            continue
        log.info("candidate %s: in-region saliency %.4f -> %.4f", tag, res.trace[0].mask_mean_saliency, res.trace.best.mask_mean_saliency)
        score = res.trace.best.mask_mean_saliency
        if best is None or score < best[0]:
            best = (score, tag, res)
    if best is None:
        raise SelectionError("all candidate operators aborted", traces)
    score, tag, res = best
    return RegionEditPlan(region, tag, res.params, score, traces)


def apply_plan(frame: np.ndarray, plan: RegionEditPlan) -> np.ndarray:
    """The plan's edit of ``frame``, restricted to the plan's region."""
    edited = ops.reapply(plan.operator, frame, plan.params)
    m = plan.region.mask[..., None]
    return m * edited + (1.0 - m) * frame


def apply_to_frames(frames: Sequence[np.ndarray], plans: Sequence[RegionEditPlan]) -> list[np.ndarray]:
    """Replay stored edits on every frame; each frame is edited independently."""
    out = []
    for t, frame in enumerate(frames):
        frame = np.asarray(frame, dtype=np.float64)
        result = frame.copy()
        for plan in plans:
            if frame.shape[:2] != plan.region.mask.shape:
                raise dc.ShapeError(
                    f"frame {t} is {frame.shape[:2]}, plans were made for {plan.region.mask.shape}"
                )
            m = plan.region.mask[..., None]
            edited = ops.reapply(plan.operator, frame, plan.params)
            result = m * edited + (1.0 - m) * result
        out.append(result)
    return out


def reduction_from_maps(before: np.ndarray, after: np.ndarray, mask: np.ndarray) -> float:
    """100 * sum(M (S(I) - S(I~))) / sum(M S(I)); positive means less saliency."""
    denom = float((mask * before).sum())
    if denom == 0.0:
        raise ZeroDivisionError("original saliency is zero inside the mask")
    return 100.0 * float((mask * (before - after)).sum()) / denom


def saliency_reduction(original: np.ndarray, edited: np.ndarray, mask: np.ndarray, backend=None) -> float:
    """Model-predicted in-mask saliency reduction in percent."""
    if original.shape != edited.shape:
        raise dc.ShapeError(f"original {original.shape} vs edited {edited.shape}")
    before = cv.saliency(dc.const(original), backend).data
    after = before if edited is original else cv.saliency(dc.const(edited), backend).data
    return reduction_from_maps(before, after, np.asarray(mask, dtype=np.float64))


@dataclass
class AutoResult:
    regions: list[DistractorRegion]
    plans: list[RegionEditPlan]
    frames: list[np.ndarray]
    reductions: list[float]


def auto_edit(
    image: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    protect: np.ndarray | None = None,
    candidates: Sequence[str] = DEFAULT_CANDIDATES,
    config: RunConfig | None = None,
    frames: Sequence[np.ndarray] | None = None,
    backend=None,
) -> AutoResult:
    """Segment, plan per region on ``image``, then replay on ``frames`` (default: the image)."""
    sal = cv.saliency(dc.const(image), backend).data
    regions = segment_distractors(sal, threshold, protect)
    plans = [select_operator(image, r, candidates, config, backend) for r in regions]
    edited = apply_to_frames([image] if frames is None else frames, plans)
    planned = apply_to_frames([image], plans)[0]
    reductions = [saliency_reduction(image, planned, p.region.mask, backend) for p in plans]
    return AutoResult(regions, plans, edited, reductions)
