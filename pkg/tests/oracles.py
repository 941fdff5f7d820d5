"""Independent reference implementations used as test oracles.

Each one is written from the definition, deliberately naive, and shares no
code with the package.
"""

import itertools
import math

import numpy as np


def brute_force_assignment(cost):
    """Minimum total over all injective maps of the smaller side into the larger."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n == 0 or m == 0:
        return 0.0
    if n <= m:
        return min(math.fsum(cost[i, p[i]] for i in range(n))
                   for p in itertools.permutations(range(m), n))
    return min(math.fsum(cost[p[j], j] for j in range(m))
               for p in itertools.permutations(range(n), m))


def raster_iou(a, b, res=1e-4):
    """IoU by counting grid cells whose centers fall in the boxes.

    The boxes are axis aligned, so the 2-D count factors into per-axis
    counts of 1-D masks on a grid of ``1 / res`` cells.
    """
    n = int(round(1 / res))
    centers = (np.arange(n) + 0.5) * res

    def mask(lo, hi):
        return (centers >= lo) & (centers < hi)

    ax, ay = mask(a[0], a[2]), mask(a[1], a[3])
    bx, by = mask(b[0], b[2]), mask(b[1], b[3])
    inter = np.count_nonzero(ax & bx) * np.count_nonzero(ay & by)
    area_a = np.count_nonzero(ax) * np.count_nonzero(ay)
    area_b = np.count_nonzero(bx) * np.count_nonzero(by)
    return inter / (area_a + area_b - inter)


def formula_giou(a, b):
    """GIoU re-derived from areas with plain floats."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    enc = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (enc - union) / enc


def naive_ap(hits, n_gt):
    """AP as the mean over ground truths of precision at the rank of each hit."""
    total, found = 0.0, 0
    for k, h in enumerate(hits, start=1):
        if h:
            found += 1
            total += found / k
    return total / n_gt


def naive_first_hit(hits):
    for k, h in enumerate(hits, start=1):
        if h:
            return k
    return None


def naive_davies_bouldin(points, labels):
    """Straight loops over clusters."""
    points = [list(map(float, p)) for p in points]
    clusters = {}
    for p, l in zip(points, labels):
        clusters.setdefault(l, []).append(p)
    keys = sorted(clusters)
    cents, scat = [], []
    for k in keys:
        pts = clusters[k]
        c = [sum(col) / len(pts) for col in zip(*pts)]
        cents.append(c)
        scat.append(sum(math.dist(p, c) for p in pts) / len(pts))
    worst = []
    for i in range(len(keys)):
        worst.append(max((scat[i] + scat[j]) / math.dist(cents[i], cents[j])
                         for j in range(len(keys)) if j != i))
    return sum(worst) / len(worst)


def spearman(x, y):
    """Spearman rank correlation for distinct values."""
    rx = np.argsort(np.argsort(x))
    ry = np.argsort(np.argsort(y))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / math.sqrt((rx ** 2).sum() * (ry ** 2).sum()))
