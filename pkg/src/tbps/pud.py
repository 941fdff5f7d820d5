"""Prototype-guided decoupling of the text-described target from its visual
context: salient features, region scaling, the prototype bank, prototype/text
contrastive alignment, multimodal fusion and the box regression head."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .assignment import solve_assignment
from .errors import PreconditionError
from .geometry import Box, box_loss, box_loss_matrix

LOGIT_CAP = 30.0


def _rows(x, name="input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise PreconditionError(f"{name} must be a list of embeddings")
    if not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{name} has non-finite entries")
    return arr


def _softmax(z: np.ndarray, axis=-1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(z: np.ndarray, axis=-1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def l2_normalize(x: np.ndarray, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise PreconditionError("cannot normalize a zero vector")
    return x / norm


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return l2_normalize(_rows(a)) @ l2_normalize(_rows(b)).T


def cross_attend(visual, text) -> np.ndarray:
    """Single-head, parameter-free scaled dot-product attention.

    Visual rows are queries; text rows are both keys and values, so every
    output row is a convex combination of the text rows.
    """
    fv, ft = _rows(visual, "visual"), np.asarray(text, dtype=np.float64)
    if ft.size == 0:
        raise PreconditionError("text features are empty")
    ft = _rows(ft, "text")
    if fv.shape[1] != ft.shape[1]:
        raise PreconditionError("visual and text dimensions differ")
    weights = _softmax(fv @ ft.T / math.sqrt(fv.shape[1]), axis=1)
    return weights @ ft


@dataclass
class ScaleParam:
    mu: float = 0.5

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.mu > 0):
            raise PreconditionError(f"scale parameter must be positive, got {self.mu}")


def region_scale(visual, salient, mu) -> np.ndarray:
    """Per-row Gaussian-kernel weight ``exp(-(1 - cos) / (2 mu^2))``."""
    mu = mu.mu if isinstance(mu, ScaleParam) else float(mu)
    if not mu > 0:
        raise PreconditionError("mu must be positive")
    fv, fs = _rows(visual, "visual"), _rows(salient, "salient")
    if fv.shape != fs.shape:
        raise PreconditionError("visual and salient rows must correspond")
    nv = np.linalg.norm(fv, axis=1)
    ns = np.linalg.norm(fs, axis=1)
    if np.any(nv == 0) or np.any(ns == 0):
        raise PreconditionError("zero-norm row in region_scale")
    sim = np.clip(np.einsum("ij,ij->i", fv, fs) / (nv * ns), -1.0, 1.0)
    return np.exp(-(1.0 - sim) / (2.0 * mu * mu))


def augment(visual, scales) -> np.ndarray:
    fv = _rows(visual, "visual")
    t = np.asarray(scales, dtype=np.float64).reshape(-1)
    if len(t) != len(fv):
        raise PreconditionError(f"{len(t)} scales for {len(fv)} visual rows")
    return fv * t[:, None]


class PrototypeBank:
    """``K`` unit-norm prototypes updated by normalized momentum averaging.

    Single writer: callers serialize :meth:`update`; reads between updates
    are safe.
    """

    def __init__(self, prototypes, momentum: float = 0.9):
        protos = _rows(prototypes, "prototypes")
        if len(protos) == 0:
            raise PreconditionError("prototype bank must be nonempty")
        if not 0.0 <= momentum < 1.0:
            raise PreconditionError("momentum must lie in [0, 1)")
        self.prototypes = l2_normalize(protos)
        self.momentum = float(momentum)
        self.counts = np.zeros(len(protos), dtype=np.int64)

    @classmethod
    def random(cls, k: int = 2048, dim: int = 256, momentum: float = 0.9, seed=0):
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((k, dim)), momentum)

    @property
    def size(self) -> int:
        return len(self.prototypes)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def assign(self, features) -> np.ndarray:
        """Nearest prototype (Euclidean) per feature row; ties go to the lowest index."""
        f = _rows(features, "features")
        out = np.empty(len(f), dtype=np.int64)
        for i, row in enumerate(f):
            d = ((self.prototypes - row) ** 2).sum(axis=1)
            out[i] = int(np.argmin(d))
        return out

    def update(self, assigned) -> "PrototypeBank":
        """Apply ``p <- normalize(m p + (1-m) mean(assigned))`` per touched prototype."""
        groups: dict[int, list[np.ndarray]] = {}
        for idx, feat in assigned:
            idx = int(idx)
            if not 0 <= idx < self.size:
                raise PreconditionError(f"prototype index {idx} out of range")
            groups.setdefault(idx, []).append(np.asarray(feat, dtype=np.float64))
        for idx in sorted(groups):
            mean = np.mean(groups[idx], axis=0)
            mixed = self.momentum * self.prototypes[idx] + (1 - self.momentum) * mean
            norm = np.linalg.norm(mixed)
            if norm > 0:
                self.prototypes[idx] = mixed / norm
            self.counts[idx] += len(groups[idx])
        return self

    def to_json(self) -> str:
        return json.dumps({"k": self.size, "dim": self.dim, "momentum": self.momentum,
                           "counts": self.counts.tolist(),
                           "prototypes": self.prototypes.reshape(-1).tolist()})

    @classmethod
    def from_json(cls, text: str) -> "PrototypeBank":
        d = json.loads(text)
        protos = np.asarray(d["prototypes"], dtype=np.float64).reshape(d["k"], d["dim"])
        bank = cls(protos, d["momentum"])
        bank.prototypes = protos  # keep stored bits exactly
        bank.counts = np.asarray(d["counts"], dtype=np.int64)
        return bank


def assign_prototype(f, bank: PrototypeBank) -> int:
    return int(bank.assign(f)[0])


def update_bank(bank: PrototypeBank, assigned) -> PrototypeBank:
    return bank.update(assigned)


def ptc_loss(protos, texts, tau: float = 0.07) -> float:
    """Symmetric prototype/text InfoNCE over cosine similarities.

    Row ``i`` of ``protos`` is the positive for row ``i`` of ``texts``;
    the result is the mean of the two directional cross-entropies.
    """
    if not tau > 0:
        raise PreconditionError("temperature must be positive")
    p, t = _rows(protos, "protos"), _rows(texts, "texts")
    if p.shape != t.shape or len(p) == 0:
        raise PreconditionError("protos and texts must have equal nonzero counts")
    pn, tn = l2_normalize(p), l2_normalize(t)
    # elementwise products summed along D: swapping arguments transposes bitwise
    logits = (pn[:, None, :] * tn[None, :, :]).sum(axis=-1) / tau
    p2t = -np.diag(_log_softmax(logits, axis=1)).mean()
    t2p = -np.diag(_log_softmax(np.ascontiguousarray(logits.T), axis=1)).mean()
    return float((p2t + t2p) / 2)


def relevance_pool(f_pro, text, tau_fuse: float = 0.07) -> np.ndarray:
    """Text tokens pooled by softmax relevance to the mean augmented visual row."""
    fp, ft = _rows(f_pro, "f_pro"), np.asarray(text, dtype=np.float64)
    if ft.size == 0:
        raise PreconditionError("text features are empty")
    ft = _rows(ft, "text")
    centre = fp.mean(axis=0)
    cn = np.linalg.norm(centre)
    tn = np.linalg.norm(ft, axis=1)
    cos = np.zeros(len(ft))
    ok = tn > 0
    if cn > 0:
        cos[ok] = ft[ok] @ centre / (tn[ok] * cn)
    w = _softmax(cos / tau_fuse)
    return w @ ft


def fuse_multimodal(f_pro, text, tau_fuse: float = 0.07) -> np.ndarray:
    """``tanh(F_pro) * pooled_text`` row-wise (Hadamard gate)."""
    fp = _rows(f_pro, "f_pro")
    pooled = relevance_pool(fp, text, tau_fuse)
    if pooled.shape[0] != fp.shape[1]:
        raise PreconditionError("visual and text dimensions differ")
    return np.tanh(fp) * pooled[None, :]


@dataclass
class BoxHead:
    """Affine stand-in for the decoder + box embedding: ``D -> 4 box + 1 conf`` logits."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[1] != 5 or self.bias.shape != (5,):
            raise PreconditionError("box head expects a (D, 5) weight and a 5-vector bias")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise PreconditionError("box head parameters must be finite")

    @classmethod
    def zeros(cls, dim: int) -> "BoxHead":
        return cls(np.zeros((dim, 5)), np.zeros(5))


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def box_logits_to_corners(logits: np.ndarray) -> np.ndarray:
    """``(.., 4)`` center-size logits -> clipped normalized corners."""
    z = np.clip(np.asarray(logits, dtype=np.float64), -LOGIT_CAP, LOGIT_CAP)
    cx, cy, w, h = (sigmoid(z[..., i]) for i in range(4))
    x1 = np.clip(cx - w / 2, 0.0, 1.0)
    y1 = np.clip(cy - h / 2, 0.0, 1.0)
    x2 = np.clip(cx + w / 2, 0.0, 1.0)
    y2 = np.clip(cy + h / 2, 0.0, 1.0)
    return np.stack([x1, y1, x2, y2], axis=-1)


def box_head_arrays(f_multi, head: BoxHead) -> tuple[np.ndarray, np.ndarray]:
    fm = _rows(f_multi, "f_multi")
    if fm.shape[1] != head.weight.shape[0]:
        raise PreconditionError("feature dimension does not match box head")
    logits = fm @ head.weight + head.bias
    return box_logits_to_corners(logits[:, :4]), sigmoid(np.clip(logits[:, 4], -LOGIT_CAP, LOGIT_CAP))


def box_head(f_multi, head: BoxHead) -> list[tuple[Box, float]]:
    boxes, conf = box_head_arrays(f_multi, head)
    return [(Box.from_array(b), float(c)) for b, c in zip(boxes, conf)]


def pud_loss(ptc: float, pred_boxes, gt_boxes, matching=None) -> float:
    """``ptc + sum of matched box losses``.

    Predictions are matched to targets with :func:`solve_assignment` on the
    box-loss cost unless an explicit list of pairs is passed.
    """
    pred = [b if isinstance(b, Box) else Box.from_array(b) for b in pred_boxes]
    gt = [b if isinstance(b, Box) else Box.from_array(b) for b in gt_boxes]
    if matching is None:
        if pred and gt:
            cost = box_loss_matrix(np.array([b.as_array() for b in pred]),
                                   np.array([b.as_array() for b in gt]))
            matching = solve_assignment(cost).pairs
        else:
            matching = []
    reg = math.fsum(box_loss(pred[i], gt[j]) for i, j in matching)
    return float(ptc) + reg
