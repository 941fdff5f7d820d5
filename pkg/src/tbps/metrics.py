"""Person-search evaluation: IoU-gated correctness, AP/mAP, CMC top-k and
the Davies-Bouldin clustering index."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import PreconditionError
from .geometry import Box, iou


@dataclass
class QueryResult:
    """Ranked detections for one query and the target's ground-truth boxes.

    ``ranked`` holds ``(gallery_id, box, score)`` triples and is re-sorted on
    construction by score descending, then gallery id, then original order.
    """

    query_id: Hashable
    ranked: list[tuple[Hashable, Box, float]]
    ground_truth: list[tuple[Hashable, Box]] = field(default_factory=list)

    def __post_init__(self):
        for _, _, s in self.ranked:
            if not np.isfinite(s):
                raise PreconditionError("ranked scores must be finite")
        order = sorted(range(len(self.ranked)),
                       key=lambda k: (-self.ranked[k][2], self.ranked[k][0], k))
        self.ranked = [self.ranked[k] for k in order]


def is_correct(pred: Box, gts: Sequence[Box], iou_threshold: float = 0.5) -> bool:
    """True iff ``pred`` overlaps some ground truth with ``IoU >= threshold``."""
    if not 0.0 < iou_threshold < 1.0:
        raise PreconditionError("iou_threshold must lie in (0, 1)")
    return any(iou(pred, g) >= iou_threshold for g in gts)


def relevance(result: QueryResult, iou_threshold: float = 0.5) -> np.ndarray:
    """0/1 hit flags along the ranking; each ground truth is credited once."""
    by_image: dict = {}
    for gid, box in result.ground_truth:
        by_image.setdefault(gid, []).append(box)
    credited: set = set()
    flags = np.zeros(len(result.ranked), dtype=bool)
    for k, (gid, box, _) in enumerate(result.ranked):
        for g_idx, g in enumerate(by_image.get(gid, ())):
            if (gid, g_idx) in credited:
                continue
            if iou(box, g) >= iou_threshold:
                credited.add((gid, g_idx))
                flags[k] = True
                break
    return flags


def ap_from_relevance(flags: np.ndarray, n_gt: int) -> float:
    """Non-interpolated AP: mean over ground truths of precision at each hit."""
    if n_gt <= 0:
        raise PreconditionError("average precision needs at least one ground truth")
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return 0.0
    hits = np.flatnonzero(flags)
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision.sum() / n_gt)


def first_hit_rank(flags: np.ndarray) -> int | None:
    """1-based rank of the first hit, or ``None``."""
    hits = np.flatnonzero(flags)
    return int(hits[0]) + 1 if len(hits) else None


def average_precision(result: QueryResult, iou_threshold: float = 0.5) -> float:
    if not result.ground_truth:
        raise PreconditionError("average precision needs at least one ground truth")
    return ap_from_relevance(relevance(result, iou_threshold), len(result.ground_truth))


def mean_average_precision(results: Sequence[QueryResult], iou_threshold: float = 0.5) -> float:
    if not results:
        return 0.0
    return float(np.mean([average_precision(r, iou_threshold) for r in results]))


def cmc_from_ranks(first_ranks: Sequence[int | None], k: int) -> float:
    if k < 1:
        raise PreconditionError("k must be at least 1")
    if len(first_ranks) == 0:
        return 0.0
    return float(np.mean([r is not None and r <= k for r in first_ranks]))


def cmc_at_k(results: Sequence[QueryResult], k: int, iou_threshold: float = 0.5) -> float:
    """Fraction of queries whose first correct detection is within the top ``k``."""
    ranks = [first_hit_rank(relevance(r, iou_threshold)) for r in results]
    return cmc_from_ranks(ranks, k)


def davies_bouldin(points, labels) -> float:
    """Mean over clusters of the worst ``(s_i + s_j) / d(c_i, c_j)`` ratio.

    ``s`` is the mean Euclidean distance to the centroid and ``d`` the
    distance between centroids. Lower is better.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise PreconditionError("one label per point required")
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise PreconditionError("Davies-Bouldin needs at least two clusters")
    centroids = np.vstack([x[labels == u].mean(axis=0) for u in uniq])
    scatter = np.array([np.linalg.norm(x[labels == u] - centroids[i], axis=1).mean()
                        for i, u in enumerate(uniq)])
    dist = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    if np.any(dist == 0):
        raise PreconditionError("coincident cluster centroids")
    ratio = (scatter[:, None] + scatter[None, :]) / dist
    return float(ratio.max(axis=1).mean())


# -- file interfaces ---------------------------------------------------------

def read_predictions(path) -> list[QueryResult]:
    """Load the harness prediction JSONL (one query per line)."""
    results = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            ranked = [(r["image"], Box.from_array(r["box"]), float(r["score"]))
                      for r in rec["ranked"]]
            gt = [(g["image"], Box.from_array(g["box"])) for g in rec["gt"]]
            results.append(QueryResult(rec["query_id"], ranked, gt))
    return results


def write_predictions(path, results: Iterable[QueryResult]) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps({
                "query_id": r.query_id,
                "ranked": [{"image": g, "box": b.as_array().tolist(), "score": s}
                           for g, b, s in r.ranked],
                "gt": [{"image": g, "box": b.as_array().tolist()} for g, b in r.ground_truth],
            }) + "\n")


def summarize(results: Sequence[QueryResult], ks=(1, 5, 10), iou_threshold=0.5) -> dict:
    out = {"mAP": mean_average_precision(results, iou_threshold)}
    for k in ks:
        out[f"top{k}"] = cmc_at_k(results, k, iou_threshold)
    out["n_queries"] = len(results)
    return out


def write_metrics(csv_path, json_path, summary: dict) -> None:
    keys = list(summary)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        w.writerow([summary[k] for k in keys])
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
