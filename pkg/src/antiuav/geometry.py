"""Box geometry and the tracking evaluation metrics.

Boxes use the corner convention ``(x1, y1, x2, y2)`` with real-valued
coordinates; area is ``(x2 - x1) * (y2 - y1)`` with no pixel-inclusive ``+1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"corner order violated: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def shift(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


@dataclass(frozen=True)
class FrameState:
    """Ground-truth state of one frame: visibility flag and box."""

    exist: bool
    box: Optional[BoundingBox] = None

    def __post_init__(self):
        if bool(self.exist) != (self.box is not None):
            raise ValueError("ground-truth box must be present iff exist == 1")


@dataclass(frozen=True)
class PredictionState:
    """What a tracker reports for one frame."""

    present: bool
    box: Optional[BoundingBox] = None
    score: float = 1.0

    def __post_init__(self):
        if self.present and self.box is None:
            raise ValueError("a present prediction needs a box")

    @property
    def absence_credit(self) -> int:
        # 1 when the tracker declares the target absent
        return 0 if self.present else 1


@dataclass
class EvalCurve:
    thresholds: np.ndarray
    values: np.ndarray
    auc: float
    empty: bool = field(default=False)

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.thresholds.shape != self.values.shape:
            raise ValueError("thresholds and values differ in length")
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be strictly increasing")


PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.round(np.arange(0, 21) * 0.05, 10)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def center_distance(a: BoundingBox, b: BoundingBox) -> float:
    ax, ay = a.center
    bx, by = b.center
    return math.hypot(ax - bx, ay - by)


def scale(b: BoundingBox) -> float:
    """Target size ``sqrt(w * h)``."""
    return math.sqrt(b.width * b.height)


def _check_aligned(pred: Sequence, gt: Sequence):
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} ground-truth frames")
    if len(gt) == 0:
        raise ValueError("empty sequence")


def frame_overlap(p: PredictionState, g: FrameState) -> float:
    """IoU credit on a visible frame; 0 when the tracker says absent."""
    if not p.present or p.box is None:
        return 0.0
    return iou(p.box, g.box)


def state_accuracy(pred: Sequence[PredictionState], gt: Sequence[FrameState]) -> float:
    """Per-sequence state accuracy.

    Visible frames score the IoU of the predicted box; invisible frames score
    1 when the tracker declares the target absent and 0 otherwise.
    """
    _check_aligned(pred, gt)
    total = 0.0
    for p, g in zip(pred, gt):
        if g.exist:
            total += frame_overlap(p, g)
        else:
            total += p.absence_credit
    return total / len(gt)


def mean_state_accuracy(per_sequence: Sequence[float]) -> float:
    values = list(per_sequence)
    if not values:
        raise ValueError("mean over zero sequences")
    return math.fsum(values) / len(values)


def _participating(pred, gt, need_present: bool):
    _check_aligned(pred, gt)
    out = []
    for p, g in zip(pred, gt):
        if not g.exist:
            continue
        if need_present and not p.present:
            continue
        out.append((p, g))
    return out


def precision_curve(
    pred: Sequence[PredictionState],
    gt: Sequence[FrameState],
    thresholds: np.ndarray = PRECISION_THRESHOLDS,
) -> EvalCurve:
    """OTB-style center-error precision over visible, tracker-present frames.

    The headline number is ``values`` at 20 px; ``auc`` is the mean value.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    frames = _participating(pred, gt, need_present=True)
    if not frames:
        return EvalCurve(thresholds, np.zeros_like(thresholds), 0.0, empty=True)
    dist = np.array([center_distance(p.box, g.box) for p, g in frames])
    values = (dist[None, :] <= thresholds[:, None]).mean(axis=1)
    return EvalCurve(thresholds, values, float(values.mean()))


def success_curve(
    pred: Sequence[PredictionState],
    gt: Sequence[FrameState],
    thresholds: np.ndarray = SUCCESS_THRESHOLDS,
) -> EvalCurve:
    """OTB-style overlap success over visible frames.

    A visible frame the tracker declares absent counts overlap 0; invisible
    frames are left to the state-accuracy metric.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    frames = _participating(pred, gt, need_present=False)
    if not frames:
        return EvalCurve(thresholds, np.zeros_like(thresholds), 0.0, empty=True)
    ov = np.array([frame_overlap(p, g) for p, g in frames])
    values = (ov[None, :] > thresholds[:, None]).mean(axis=1)
    return EvalCurve(thresholds, values, float(values.mean()))


def precision_at(curve: EvalCurve, pixels: float = 20.0) -> float:
    idx = np.flatnonzero(np.isclose(curve.thresholds, pixels))
    if idx.size == 0:
        raise ValueError(f"curve has no {pixels}px threshold")
    return float(curve.values[idx[0]])


def average_curves(curves: Sequence[EvalCurve]) -> EvalCurve:
    """Mean of per-sequence curves, skipping sequences with no scored frames."""
    used = [c for c in curves if not c.empty]
    if not curves:
        raise ValueError("no curves to average")
    thresholds = curves[0].thresholds
    if not used:
        return EvalCurve(thresholds, np.zeros_like(thresholds), 0.0, empty=True)
    values = np.mean([c.values for c in used], axis=0)
    return EvalCurve(thresholds, values, float(values.mean()))
