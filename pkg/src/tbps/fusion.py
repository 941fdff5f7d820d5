"""Inference-time fusion of detection-path and text-path candidate boxes."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import PreconditionError
from .geometry import Box, iou_matrix


class Source(str, Enum):
    MUE = "mue"
    PUD = "pud"


@dataclass(frozen=True)
class ScoredCandidate:
    box: Box
    confidence: float
    source: Source = Source.MUE

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise PreconditionError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FusedCandidate:
    box: Box
    score: float
    mue_index: int
    pud_index: int
    iou: float


@dataclass(frozen=True)
class FinalPrediction:
    """Top-scoring box for one image; ``box is None`` means no detection."""

    box: Box | None
    score: float
    source: str

    @property
    def detected(self) -> bool:
        return self.box is not None


NO_DETECTION = FinalPrediction(None, 0.0, "none")


def _check_beta(beta: float) -> None:
    if not 0.0 <= beta <= 1.0:
        raise PreconditionError(f"beta must lie in [0, 1], got {beta}")


def pair_boxes(mue_boxes: np.ndarray, pud_boxes: np.ndarray,
               iou_threshold: float = 0.5) -> list[tuple[int, int, float]]:
    """Greedy one-to-one pairing by descending IoU.

    Only pairs with ``IoU > iou_threshold`` are eligible. Ties in IoU are
    resolved by lower MUE index, then lower PUD index. The pairing does not
    depend on confidences, so it can be computed once per image and reused
    for every query and every ``beta``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise PreconditionError("iou_threshold must lie in (0, 1)")
    mue_boxes = np.asarray(mue_boxes, dtype=np.float64).reshape(-1, 4)
    pud_boxes = np.asarray(pud_boxes, dtype=np.float64).reshape(-1, 4)
    if len(mue_boxes) == 0 or len(pud_boxes) == 0:
        return []
    ious = iou_matrix(mue_boxes, pud_boxes)
    ii, jj = np.nonzero(ious > iou_threshold)
    if len(ii) == 0:
        return []
    vals = ious[ii, jj]
    order = np.lexsort((jj, ii, -vals))
    used_i: set[int] = set()
    used_j: set[int] = set()
    pairs = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j, float(vals[k])))
    return pairs


def fuse_candidates(mue: Sequence[ScoredCandidate], pud: Sequence[ScoredCandidate],
                    iou_threshold: float = 0.5, beta: float = 0.5) -> list[FusedCandidate]:
    """Pair MUE and PUD candidates and score each pair ``(1 - beta) c_i + beta c_j``.

    The fused box is the box of the more confident member (MUE on equal
    confidence). Output is sorted by score, then IoU (both descending), then
    MUE index.
    """
    _check_beta(beta)
    if not mue or not pud:
        return []
    pairs = pair_boxes(np.array([c.box.as_array() for c in mue]),
                       np.array([c.box.as_array() for c in pud]), iou_threshold)
    fused = []
    for i, j, ov in pairs:
        ci, cj = mue[i].confidence, pud[j].confidence
        score = (1.0 - beta) * ci + beta * cj
        box = mue[i].box if ci >= cj else pud[j].box
        fused.append(FusedCandidate(box, score, i, j, ov))
    fused.sort(key=lambda f: (-f.score, -f.iou, f.mue_index))
    return fused


def select_final(fused: Sequence[FusedCandidate], fallback_mue: Sequence[ScoredCandidate],
                 fallback_pud: Sequence[ScoredCandidate], beta: float = 0.5) -> FinalPrediction:
    """Top fused candidate, else the best single-path candidate.

    Without any matched pair, MUE confidences are weighted by ``1 - beta``
    and PUD confidences by ``beta``; MUE wins ties.
    """
    _check_beta(beta)
    if fused:
        top = fused[0]
        return FinalPrediction(top.box, top.score, "fused")
    best = NO_DETECTION
    for weight, cands, name in ((1.0 - beta, fallback_mue, "mue"), (beta, fallback_pud, "pud")):
        for c in cands:
            s = weight * c.confidence
            if best.box is None or s > best.score:
                best = FinalPrediction(c.box, s, name)
    return best
