"""Cross-modal re-identification objectives: class-level similarity
distribution matching, instance-level InfoNCE, and norm-aware embedding with
an online-instance-matching lookup table and circular queue."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Hashable, Iterable

import numpy as np

from .errors import PreconditionError

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Temperatures:
    rho: float = 0.02
    eps_itc: float = 0.07
    eps_kl: float = 1e-8

    def __post_init__(self):
        for name in ("rho", "eps_itc", "eps_kl"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"{name} must be positive")


def _square(sim) -> np.ndarray:
    s = np.asarray(sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise PreconditionError("similarity matrix must be square")
    if not np.all(np.isfinite(s)):
        raise PreconditionError("similarity matrix has non-finite entries")
    return s


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def positive_targets(positives) -> np.ndarray:
    """Row-wise ground-truth distribution, uniform over each row's positives."""
    pos = np.asarray(positives, dtype=bool)
    counts = pos.sum(axis=1)
    if np.any(counts == 0):
        raise PreconditionError("every row needs at least one positive")
    return pos / counts[:, None]


def _kl_direction(sim: np.ndarray, positives: np.ndarray, rho: float, eps: float) -> float:
    logp = _log_softmax_rows(sim / rho)
    p = np.exp(logp)
    q = positive_targets(positives)
    return float((p * (logp - np.log(q + eps))).sum() / len(sim))


def sdm_kl_loss(sim, positives, rho: float = 0.02, eps_kl: float = 1e-8) -> float:
    """Image-to-text plus text-to-image ``KL(p || q)`` with ``p = softmax(sim / rho)``.

    ``q`` is uniform over the positives of each row (resp. column). The
    stabilizer ``eps_kl`` is added to ``q`` inside the log, so the value can
    dip below zero by at most ``N * eps_kl`` when ``p == q``.
    """
    s = _square(sim)
    pos = np.asarray(positives, dtype=bool)
    if pos.shape != s.shape:
        raise PreconditionError("positives mask must match the similarity matrix")
    if not (rho > 0 and eps_kl > 0):
        raise PreconditionError("rho and eps_kl must be positive")
    i2t = _kl_direction(s, pos, rho, eps_kl)
    t2i = _kl_direction(np.ascontiguousarray(s.T), np.ascontiguousarray(pos.T), rho, eps_kl)
    return i2t + t2i


def infonce_loss(sim, eps_itc: float = 0.07) -> float:
    """Mean over rows of ``-log softmax(sim_i / eps)[i]``."""
    if not eps_itc > 0:
        raise PreconditionError("InfoNCE temperature must be positive")
    s = _square(sim)
    return float(-np.diag(_log_softmax_rows(s / eps_itc)).mean())


def cfa_loss(class_l: float, ins_l: float) -> float:
    return float(class_l) + float(ins_l)


def reid_loss(cfa: float, nae: float) -> float:
    return float(cfa) + float(nae)


def nae_split(f, a: float = 1.0, b: float = 0.25) -> tuple[float, np.ndarray]:
    """Split a feature into a norm-derived confidence and a unit direction."""
    f = np.asarray(f, dtype=np.float64)
    if not b > 0:
        raise PreconditionError("scale b must be positive")
    r = float(np.linalg.norm(f))
    if r == 0 or not math.isfinite(r):
        raise PreconditionError("cannot split a zero or non-finite feature")
    z = (r - a) / b
    conf = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return conf, f / r


def _check_unit(f, what="feature") -> np.ndarray:
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(f)) or abs(np.linalg.norm(f) - 1.0) > UNIT_TOL:
        raise PreconditionError(f"{what} must be unit-norm")
    return f


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class LookupTable:
    """Labeled identity features (unit norm), updated by normalized momentum."""

    def __init__(self, dim: int, momentum: float = 0.5):
        if not 0.0 <= momentum <= 1.0:
            raise PreconditionError("LUT momentum must lie in [0, 1]")
        self.dim = int(dim)
        self.momentum = float(momentum)
        self.labels: list[Hashable] = []
        self._index: dict[Hashable, int] = {}
        self._rows: list[np.ndarray] = []

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self._index

    def add(self, label, f) -> None:
        if label in self._index:
            raise PreconditionError(f"label {label!r} already in lookup table")
        f = _check_unit(f)
        if len(f) != self.dim:
            raise PreconditionError("feature dimension mismatch")
        self._index[label] = len(self.labels)
        self.labels.append(label)
        self._rows.append(f.copy())

    def index(self, label) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise PreconditionError(f"label {label!r} not in lookup table") from None

    def vector(self, label) -> np.ndarray:
        return self._rows[self.index(label)]

    @property
    def matrix(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.dim))
        return np.vstack(self._rows)

    def update(self, label, f, momentum: float | None = None) -> "LookupTable":
        """``v <- normalize(g v + (1 - g) f)``."""
        g = self.momentum if momentum is None else float(momentum)
        i = self.index(label)
        f = _check_unit(f)
        mixed = g * self._rows[i] + (1.0 - g) * f
        norm = np.linalg.norm(mixed)
        # antipodal average with g = 0.5 has no direction; keep the old entry
        if norm > 1e-12:
            self._rows[i] = mixed / norm
        return self

    def to_dict(self) -> dict:
        return {"dim": self.dim, "momentum": self.momentum,
                "labels": list(self.labels),
                "rows": [r.tolist() for r in self._rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "LookupTable":
        lut = cls(d["dim"], d["momentum"])
        for label, row in zip(d["labels"], d["rows"]):
            lut._index[label] = len(lut.labels)
            lut.labels.append(label)
            lut._rows.append(np.asarray(row, dtype=np.float64))
        return lut


class CircularQueue:
    """Bounded FIFO of unit-norm features for unlabeled identities."""

    def __init__(self, capacity: int = 500, dim: int | None = None):
        if capacity < 1:
            raise PreconditionError("queue capacity must be positive")
        self.capacity = int(capacity)
        self.dim = dim
        self._items: deque[np.ndarray] = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, f) -> "CircularQueue":
        f = _check_unit(f, "queued feature")
        if self.dim is None:
            self.dim = len(f)
        elif len(f) != self.dim:
            raise PreconditionError("feature dimension mismatch")
        self._items.append(f.copy())
        return self

    @property
    def matrix(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, self.dim or 0))
        return np.vstack(list(self._items))

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim,
                "rows": [r.tolist() for r in self._items]}

    @classmethod
    def from_dict(cls, d: dict) -> "CircularQueue":
        cq = cls(d["capacity"], d["dim"])
        for row in d["rows"]:
            cq._items.append(np.asarray(row, dtype=np.float64))
        return cq


def lut_update(lut: LookupTable, label, f, gamma: float | None = None) -> LookupTable:
    return lut.update(label, f, gamma)


def cq_push(cq: CircularQueue, f) -> CircularQueue:
    return cq.push(f)


def is_unknown(label) -> bool:
    return label is None or (isinstance(label, (int, np.integer)) and label < 0)


def oim_logits(f: np.ndarray, lut: LookupTable, cq: CircularQueue, temp: float) -> np.ndarray:
    bank = lut.matrix
    if len(cq):
        bank = np.vstack([bank, cq.matrix])
    return bank @ f / temp


def oim_loss(f, label, lut: LookupTable, cq: CircularQueue, temp: float = 0.07) -> float:
    """Cross-entropy of the feature against its identity's lookup-table slot.

    Scores are ``[f . LUT ; f . CQ] / temp``. Features with an unknown label
    contribute zero; queueing them is the caller's job (:func:`cq_push`).
    """
    if not temp > 0:
        raise PreconditionError("OIM temperature must be positive")
    f = _check_unit(f)
    if is_unknown(label):
        return 0.0
    target = lut.index(label)
    z = oim_logits(f, lut, cq, temp)
    m = z.max()
    return float(-(z[target] - m - math.log(np.exp(z - m).sum())))


def snapshot(lut: LookupTable, cq: CircularQueue) -> str:
    return json.dumps({"lut": lut.to_dict(), "cq": cq.to_dict()})


def restore(text: str) -> tuple[LookupTable, CircularQueue]:
    d = json.loads(text)
    return LookupTable.from_dict(d["lut"]), CircularQueue.from_dict(d["cq"])


def build_lut(labels: Iterable, features: np.ndarray, dim: int, momentum=0.5) -> LookupTable:
    lut = LookupTable(dim, momentum)
    for label, f in zip(labels, features):
        lut.add(label, _unit(np.asarray(f, dtype=np.float64)))
    return lut
