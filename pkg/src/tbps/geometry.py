"""Axis-aligned boxes in normalized corner format and the overlap losses
shared by the set-prediction and regression heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import PreconditionError


@dataclass(frozen=True)
class Box:
    """Normalized ``(x1, y1, x2, y2)`` rectangle with strictly positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise PreconditionError(f"non-finite box coordinates {coords}")
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise PreconditionError(f"box coordinates outside [0, 1]: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise PreconditionError(f"degenerate box {coords}")

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in a)
        return cls(x1, y1, x2, y2)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2,
                self.x2 - self.x1, self.y2 - self.y1)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def _check(box) -> Box:
    if isinstance(box, Box):
        return box
    return Box.from_array(box)


def _overlap_terms(a: Box, b: Box):
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter, union, enclose


def iou(a, b) -> float:
    a, b = _check(a), _check(b)
    inter, union, _ = _overlap_terms(a, b)
    return inter / union


def giou(a, b) -> float:
    """Generalized IoU; lies in (-1, 1] and never exceeds :func:`iou`."""
    a, b = _check(a), _check(b)
    inter, union, enclose = _overlap_terms(a, b)
    # rounding can push union past an exactly nested enclosure
    return inter / union - max(enclose - union, 0.0) / enclose


def l1_distance(a, b) -> float:
    a, b = _check(a), _check(b)
    return (abs(a.x1 - b.x1) + abs(a.y1 - b.y1)
            + abs(a.x2 - b.x2) + abs(a.y2 - b.y2))


def box_loss(pred, gt) -> float:
    """``(1 - GIoU) + L1`` between two boxes; zero iff they coincide."""
    pred, gt = _check(pred), _check(gt)
    return (1.0 - giou(pred, gt)) + l1_distance(pred, gt)


# -- vectorized helpers used by the inference engine ------------------------

def as_box_array(boxes: Iterable) -> np.ndarray:
    rows = [b.as_array() if isinstance(b, Box) else np.asarray(b, float) for b in boxes]
    if not rows:
        return np.zeros((0, 4))
    return np.vstack(rows).astype(np.float64)


def validate_box_array(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise PreconditionError("non-finite box coordinates")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise PreconditionError("box coordinates outside [0, 1]")
    if np.any(arr[:, 0] >= arr[:, 2]) or np.any(arr[:, 1] >= arr[:, 3]):
        raise PreconditionError("degenerate box in array")
    return arr


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = erb - elt
    enclose = ewh[..., 0] * ewh[..., 1]
    return inter / union - np.maximum(enclose - union, 0.0) / enclose


def box_loss_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    l1 = np.abs(pred[:, None, :] - gt[None, :, :]).sum(-1)
    return (1.0 - giou_matrix(pred, gt)) + l1


def cxcywh_to_xyxy(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    cx, cy, w, h = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x1, y1, x2, y2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)
