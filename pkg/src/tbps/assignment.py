"""Minimum-cost bipartite matching and the set-prediction detection loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import PreconditionError
from .geometry import Box, as_box_array, box_loss_matrix

PERSON = 0
NO_OBJECT = 1
LOG_PROB_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class Matching:
    pairs: list[tuple[int, int]]
    unmatched: list[int] = field(default_factory=list)
    total: float = 0.0


@dataclass(frozen=True)
class Prediction:
    box: Box
    class_logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.class_logits, dtype=np.float64).reshape(-1)
        if logits.shape != (2,) or not np.all(np.isfinite(logits)):
            raise PreconditionError("class_logits must be a finite 2-vector")
        object.__setattr__(self, "class_logits", logits)

    @property
    def probs(self) -> np.ndarray:
        return softmax2(self.class_logits)


def softmax2(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax2(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _matching_total(cost: np.ndarray, pairs) -> float:
    return math.fsum(cost[r, c] for r, c in pairs)


def _best_completion(cost, fixed, free_rows, free_cols):
    """Optimal pairs for the sub-problem on the free rows/cols, plus ``fixed``."""
    pairs = list(fixed)
    if free_rows and free_cols:
        sub = cost[np.ix_(free_rows, free_cols)]
        ri, ci = linear_sum_assignment(sub)
        pairs += [(free_rows[a], free_cols[b]) for a, b in zip(ri, ci)]
    return pairs


def solve_assignment(cost) -> Matching:
    """Minimum-cost matching of the smaller side into the larger.

    Among optimal matchings the lexicographically smallest row-sorted pair
    list is returned (lowest row first, then lowest column).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise PreconditionError("cost matrix must be 2-D")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Matching(pairs=[], unmatched=list(range(n)), total=0.0)
    if np.isnan(cost).any():
        raise PreconditionError("cost matrix contains NaN")
    if not np.all(np.isfinite(cost)):
        raise PreconditionError("cost matrix contains non-finite entries")

    ri, ci = linear_sum_assignment(cost)
    best = sorted(zip(ri.tolist(), ci.tolist()))
    opt = _matching_total(cost, best)
    tol = 1e-12 * (1.0 + abs(opt))
    k = min(n, m)

    fixed: list[tuple[int, int]] = []
    used_cols: set[int] = set()
    dropped: set[int] = set()
    for r in range(n):
        if len(fixed) == k:
            dropped.update(range(r, n))
            break
        current = dict(best)
        limit = current.get(r, m)
        accepted = None
        for c in range(limit):
            if c in used_cols:
                continue
            trial_fixed = fixed + [(r, c)]
            free_rows = [i for i in range(r + 1, n) if i not in dropped]
            free_cols = [j for j in range(m) if j not in used_cols and j != c]
            need = k - len(trial_fixed)
            if min(len(free_rows), len(free_cols)) < need:
                continue
            trial = _best_completion(cost, trial_fixed, free_rows, free_cols)
            if _matching_total(cost, trial) <= opt + tol:
                accepted = sorted(trial)
                break
        if accepted is not None:
            best = accepted
        if r in dict(best):
            c = dict(best)[r]
            fixed.append((r, c))
            used_cols.add(c)
        else:
            dropped.add(r)

    pairs = sorted(fixed)
    matched = {r for r, _ in pairs}
    return Matching(pairs=pairs,
                    unmatched=[i for i in range(n) if i not in matched],
                    total=_matching_total(cost, pairs))


def _as_pred_arrays(preds: Sequence[Prediction]):
    boxes = as_box_array([p.box for p in preds])
    logits = np.array([p.class_logits for p in preds], dtype=np.float64).reshape(-1, 2)
    return boxes, logits


def matching_cost(pred_boxes, logits, gt_boxes, gt_classes, class_cost="prob"):
    """Cost matrix used to match predictions to targets.

    ``class_cost="prob"`` uses ``-p(c)`` for the class term (the usual
    detection-transformer convention); ``"log"`` uses the clamped ``-log p(c)``
    so that matching optimizes exactly the loss being trained.
    """
    gt_classes = np.asarray(gt_classes, dtype=int)
    if class_cost == "prob":
        cls = -softmax2(logits)[:, gt_classes]
    elif class_cost == "log":
        cls = -np.maximum(log_softmax2(logits), LOG_PROB_FLOOR)[:, gt_classes]
    else:
        raise PreconditionError(f"unknown class_cost {class_cost!r}")
    return cls + box_loss_matrix(pred_boxes, gt_boxes)


def mue_loss_arrays(pred_boxes, logits, gt_boxes, gt_classes,
                    no_object_weight=0.1, class_cost="prob", matching=None):
    """Array form of :func:`mue_loss`; returns ``(loss, matching)``."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, 2)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=int).reshape(-1)
    n, m = len(pred_boxes), len(gt_boxes)
    if m > n:
        raise PreconditionError(f"{m} targets but only {n} prediction slots")
    if matching is None:
        if m:
            matching = solve_assignment(matching_cost(pred_boxes, logits, gt_boxes,
                                                      gt_classes, class_cost))
        else:
            matching = Matching(pairs=[], unmatched=list(range(n)))
    logp = np.maximum(log_softmax2(logits), LOG_PROB_FLOOR) if n else np.zeros((0, 2))
    terms = []
    if matching.pairs:
        rows = np.array([r for r, _ in matching.pairs])
        cols = np.array([c for _, c in matching.pairs])
        bl = box_loss_matrix(pred_boxes[rows], gt_boxes[cols]).diagonal()
        terms += list(-logp[rows, gt_classes[cols]] + bl)
    terms += [-no_object_weight * logp[i, NO_OBJECT] for i in matching.unmatched]
    return math.fsum(terms), matching


def mue_loss(preds: Sequence[Prediction], gts: Sequence[tuple[Box, int]],
             no_object_weight: float = 0.1, class_cost: str = "prob") -> float:
    """Hungarian-matched classification + box loss over all prediction slots.

    Matched slots pay ``-log p(class) + box_loss``; unmatched slots pay
    ``no_object_weight * -log p(no-object)``. Log-probabilities are floored
    at ``log(1e-12)``.
    """
    boxes, logits = _as_pred_arrays(preds)
    gt_boxes = as_box_array([g[0] for g in gts])
    gt_classes = [int(g[1]) for g in gts]
    loss, _ = mue_loss_arrays(boxes, logits, gt_boxes, gt_classes,
                              no_object_weight, class_cost)
    return loss
