"""Analytic gradients of the differentiable losses, central-difference
verification and the normalized adaptive combination of the three module
losses.

Discrete choices (Hungarian matching, prototype argmin, queue contents) are
held fixed within a step: gradients are those of the selected branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .assignment import (LOG_PROB_FLOOR, NO_OBJECT, Matching, log_softmax2,
                         matching_cost, mue_loss_arrays, solve_assignment)
from .errors import PreconditionError
from .pud import LOGIT_CAP, sigmoid


# -- shared backprop helpers -------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def normalize_backward(x: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``x / |x|`` (row-wise) back to ``x``."""
    x = np.atleast_2d(x)
    g = np.atleast_2d(grad_unit)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    u = x / n
    return (g - u * (g * u).sum(axis=1, keepdims=True)) / n


def cosine_backward(a: np.ndarray, b: np.ndarray, grad_sim: np.ndarray):
    """Gradients of ``sum(G * cos(a_i, b_j))`` w.r.t. the rows of ``a`` and ``b``."""
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return normalize_backward(a, grad_sim @ bn), normalize_backward(b, grad_sim.T @ an)


def _cosine(a, b):
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return an @ bn.T


# -- contrastive losses -----------------------------------------------------

def ptc_grad(protos, texts, tau: float = 0.07):
    """``(loss, d_protos, d_texts)`` of the symmetric prototype/text loss."""
    p = np.asarray(protos, dtype=np.float64)
    t = np.asarray(texts, dtype=np.float64)
    k = len(p)
    z = _cosine(p, t) / tau
    lr, lc = _log_softmax_rows(z), _log_softmax_rows(z.T)
    loss = -(np.trace(lr) + np.trace(lc)) / (2 * k)
    eye = np.eye(k)
    dz = ((np.exp(lr) - eye) + (np.exp(lc) - eye).T) / (2 * k)
    dp, dt = cosine_backward(p, t, dz / tau)
    return float(loss), dp, dt


def infonce_grad(sim, eps_itc: float = 0.07):
    """``(loss, d_sim)``; the gradient is ``(softmax(S/eps) - I) / (eps N)``."""
    s = np.asarray(sim, dtype=np.float64)
    n = len(s)
    ls = _log_softmax_rows(s / eps_itc)
    loss = -np.trace(ls) / n
    return float(loss), (np.exp(ls) - np.eye(n)) / (eps_itc * n)


def _kl_rows_grad(s, pos, rho, eps):
    n = len(s)
    logp = _log_softmax_rows(s / rho)
    p = np.exp(logp)
    q = pos / pos.sum(axis=1, keepdims=True)
    a = logp - np.log(q + eps)
    loss = (p * a).sum() / n
    dz = p * (a - (p * a).sum(axis=1, keepdims=True)) / n
    return loss, dz / rho


def sdm_kl_grad(sim, positives, rho: float = 0.02, eps_kl: float = 1e-8):
    """``(loss, d_sim)`` of the two-direction similarity-distribution KL."""
    s = np.asarray(sim, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if np.any(pos.sum(axis=1) == 0) or np.any(pos.sum(axis=0) == 0):
        raise PreconditionError("every row and column needs a positive")
    l1, g1 = _kl_rows_grad(s, pos, rho, eps_kl)
    l2, g2 = _kl_rows_grad(np.ascontiguousarray(s.T), np.ascontiguousarray(pos.T), rho, eps_kl)
    return float(l1 + l2), g1 + g2.T


def oim_grad(f, bank: np.ndarray, target: int, temp: float = 0.07):
    """``(loss, d_f)`` of OIM cross-entropy against ``bank`` rows (LUT then CQ)."""
    f = np.asarray(f, dtype=np.float64)
    z = bank @ f / temp
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    p = np.exp(z - lse)
    p[target] -= 1.0
    return float(lse - z[target]), bank.T @ p / temp


def oim_direction_grad(x, bank: np.ndarray, target: int, temp: float = 0.07):
    """OIM on the direction of a raw (unnormalized) feature, as used in training."""
    x = np.asarray(x, dtype=np.float64)
    loss, gu = oim_grad(x / np.linalg.norm(x), bank, target, temp)
    return loss, normalize_backward(x, gu)[0]


# -- box losses ---------------------------------------------------------------

def box_loss_grad(pred, gt):
    """``(loss, d_pred)`` for ``(1 - GIoU) + L1``.

    Kinks (a predicted edge equal to the target edge) take the one-sided
    branch that makes the identical-box point stationary; the L1 subgradient
    at zero is zero.
    """
    x1, y1, x2, y2 = (float(v) for v in pred)
    gx1, gy1, gx2, gy2 = (float(v) for v in gt)
    w, h = x2 - x1, y2 - y1
    area_p, area_g = w * h, (gx2 - gx1) * (gy2 - gy1)
    iw = min(x2, gx2) - max(x1, gx1)
    ih = min(y2, gy2) - max(y1, gy1)
    on = iw > 0 and ih > 0
    inter = iw * ih if on else 0.0
    union = area_p + area_g - inter
    cw = max(x2, gx2) - min(x1, gx1)
    ch = max(y2, gy2) - min(y1, gy1)
    enc = cw * ch
    diff = np.array([x1 - gx1, y1 - gy1, x2 - gx2, y2 - gy2])
    loss = 2.0 - inter / union - union / enc + np.abs(diff).sum()

    d_area = np.array([-h, -w, h, w])
    d_inter = np.zeros(4)
    if on:
        d_inter = np.array([-ih * (x1 > gx1), -iw * (y1 > gy1),
                            ih * (x2 < gx2), iw * (y2 < gy2)])
    d_union = d_area - d_inter
    d_enc = np.array([-ch * (x1 < gx1), -cw * (y1 < gy1),
                      ch * (x2 > gx2), cw * (y2 > gy2)])
    grad = (-(d_inter * union - inter * d_union) / union ** 2
            - (d_union * enc - union * d_enc) / enc ** 2
            + np.sign(diff))
    return float(loss), grad


def box_tie(pred, gt, tol: float = 1e-6) -> bool:
    """True when a predicted edge sits within ``tol`` of a kink."""
    p, g = np.asarray(pred, float), np.asarray(gt, float)
    close = np.abs(p - g) < tol
    # crossing edges of the other box also change the active branch
    cross = np.abs(np.array([p[0] - g[2], p[1] - g[3], p[2] - g[0], p[3] - g[1]])) < tol
    return bool(close.any() or cross.any())


def corners_from_logits_grad(logits: np.ndarray):
    """Corners from center-size logits and the ``(n, 4, 4)`` Jacobian."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1, 4)
    active = np.abs(z) < LOGIT_CAP
    zc = np.clip(z, -LOGIT_CAP, LOGIT_CAP)
    s = sigmoid(zc)
    ds = s * (1 - s) * active
    cx, cy, w, h = s.T
    raw = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    inside = (raw > 0) & (raw < 1)
    corners = np.clip(raw, 0.0, 1.0)
    # d raw / d (cx, cy, w, h)
    base = np.array([[1, 0, -0.5, 0], [0, 1, 0, -0.5], [1, 0, 0.5, 0], [0, 1, 0, 0.5]], float)
    jac = base[None, :, :] * ds[:, None, :] * inside[:, :, None]
    return corners, jac


def mue_grad(pred_boxes, logits, gt_boxes, gt_classes, no_object_weight=0.1,
             class_cost="prob", matching: Matching | None = None):
    """Gradient of the set-prediction loss with the matching held fixed.

    Returns ``(loss, d_boxes, d_logits, matching, tied)`` where ``tied``
    flags a matching whose optimum is not unique within ``1e-9``.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, 2)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=int).reshape(-1)
    tied = False
    if matching is None and len(gt_boxes):
        cost = matching_cost(pred_boxes, logits, gt_boxes, gt_classes, class_cost)
        matching = solve_assignment(cost)
        tied = _assignment_tied(cost, matching)
    loss, matching = mue_loss_arrays(pred_boxes, logits, gt_boxes, gt_classes,
                                     no_object_weight, class_cost, matching)
    logp = log_softmax2(logits)
    p = np.exp(logp)
    d_logits = np.zeros_like(logits)
    d_boxes = np.zeros_like(pred_boxes)

    def class_grad(i, c, weight):
        if logp[i, c] <= LOG_PROB_FLOOR:
            return  # floored: constant
        onehot = np.zeros(2)
        onehot[c] = 1.0
        d_logits[i] += weight * (p[i] - onehot)

    for i, j in matching.pairs:
        class_grad(i, gt_classes[j], 1.0)
        _, g = box_loss_grad(pred_boxes[i], gt_boxes[j])
        d_boxes[i] += g
    for i in matching.unmatched:
        class_grad(i, NO_OBJECT, no_object_weight)
    return loss, d_boxes, d_logits, matching, tied


def _assignment_tied(cost: np.ndarray, matching: Matching, tol: float = 1e-9) -> bool:
    """Whether forbidding any chosen pair leaves an equally cheap matching."""
    big = np.abs(cost).sum() + 1.0
    for r, c in matching.pairs:
        alt = cost.copy()
        alt[r, c] = big
        if solve_assignment(alt).total <= matching.total + tol:
            return True
    return False


# -- verification -------------------------------------------------------------

def central_difference(fun: Callable[[np.ndarray], float], x: np.ndarray,
                       h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(len(flat)):
        old = flat[k]
        flat[k] = old + h
        fp = fun(x)
        flat[k] = old - h
        fm = fun(x)
        flat[k] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise PreconditionError(f"non-finite loss while differencing coordinate {k}")
        grad[k] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def fd_check(fun: Callable, point, h: float = 1e-5, analytic=None) -> float:
    """Max over coordinates of ``|analytic - fd| / max(1, |analytic|)``.

    ``fun(x)`` returns either ``(value, grad)`` or just a value, in which
    case ``analytic`` must be given.
    """
    if not h > 0:
        raise PreconditionError("step h must be positive")
    x = np.array(point, dtype=np.float64, copy=True)

    def value(z):
        out = fun(z)
        return float(out[0] if isinstance(out, tuple) else out)

    if analytic is None:
        out = fun(x.copy())
        if not isinstance(out, tuple):
            raise PreconditionError("fun must return (value, grad) when analytic is omitted")
        v, analytic = out
        if not math.isfinite(float(v)):
            raise PreconditionError("non-finite loss at the check point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    if not np.all(np.isfinite(analytic)):
        raise PreconditionError("non-finite analytic gradient")
    fd = central_difference(value, x, h)
    return float(np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))))


# -- combined objective -------------------------------------------------------

@dataclass
class LossWeights:
    """Weights of the three module losses.

    With ``adaptive`` on, each weight becomes the inverse of an exponential
    moving average of its loss magnitude once ``warmup`` steps have passed,
    so every weighted term sits near one and none dominates.
    """

    alphas: np.ndarray = field(default_factory=lambda: np.ones(3))
    adaptive: bool = True
    decay: float = 0.99
    warmup: int = 10
    ema: np.ndarray | None = None
    steps: int = 0

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(3)
        if np.any(self.alphas < 0) or not np.any(self.alphas > 0):
            raise PreconditionError("weights must be non-negative and not all zero")

    def observe(self, losses: Sequence[float]) -> None:
        losses = np.abs(np.asarray(losses, dtype=np.float64))
        self.ema = losses.copy() if self.ema is None else (
            self.decay * self.ema + (1 - self.decay) * losses)
        self.steps += 1
        if self.adaptive and self.steps > self.warmup:
            self.alphas = 1.0 / (self.ema + 1e-8)

    @property
    def normalized(self) -> np.ndarray:
        return self.alphas / self.alphas.sum()


def total_loss(l_mue: float, l_pud: float, l_reid: float, weights) -> float:
    """``(a1 L_mue + a2 L_pud + a3 L_reid) / (a1 + a2 + a3)``."""
    alphas = weights.alphas if isinstance(weights, LossWeights) else np.asarray(weights, float)
    if alphas.shape != (3,) or np.any(alphas < 0):
        raise PreconditionError("need three non-negative weights")
    if alphas.sum() <= 0:
        raise PreconditionError("weights must not all be zero")
    return float(np.dot(alphas, [l_mue, l_pud, l_reid]) / alphas.sum())


@dataclass
class LossGrad:
    value: float
    grads: dict
    tied: bool = False


def grad_losses(batch: dict) -> dict[str, LossGrad]:
    """Evaluate every differentiable loss present in ``batch`` with gradients.

    Recognized keys: ``ptc`` (protos, texts, tau), ``infonce`` (sim, eps),
    ``sdm`` (sim, positives, rho, eps_kl), ``box`` (pred, gt), ``oim`` (f,
    bank, target, temp) and ``mue`` (pred_boxes, logits, gt_boxes,
    gt_classes, no_object_weight).
    """
    out: dict[str, LossGrad] = {}
    if "ptc" in batch:
        v, gp, gt = ptc_grad(**batch["ptc"])
        out["ptc"] = LossGrad(v, {"protos": gp, "texts": gt})
    if "infonce" in batch:
        v, g = infonce_grad(**batch["infonce"])
        out["infonce"] = LossGrad(v, {"sim": g})
    if "sdm" in batch:
        v, g = sdm_kl_grad(**batch["sdm"])
        out["sdm"] = LossGrad(v, {"sim": g})
    if "box" in batch:
        v, g = box_loss_grad(**batch["box"])
        out["box"] = LossGrad(v, {"pred": g}, box_tie(batch["box"]["pred"], batch["box"]["gt"]))
    if "oim" in batch:
        v, g = oim_grad(**batch["oim"])
        out["oim"] = LossGrad(v, {"f": g})
    if "mue" in batch:
        v, gb, gl, _, tied = mue_grad(**batch["mue"])
        out["mue"] = LossGrad(v, {"pred_boxes": gb, "logits": gl}, tied)
    return out


# -- randomized suite ---------------------------------------------------------

def _random_box(rng: np.random.Generator) -> np.ndarray:
    x1, y1 = rng.uniform(0.0, 0.6, 2)
    w, h = rng.uniform(0.1, 0.4, 2)
    return np.array([x1, y1, x1 + w, y1 + h])


def gradcheck_suite(n_points: int = 100, seed: int = 0, h: float = 1e-5,
                    losses: Sequence[str] = ("ptc", "infonce", "sdm_kl", "box", "oim", "mue")
                    ) -> dict[str, float]:
    """Worst ``fd_check`` error per loss over ``n_points`` random draws.

    Box draws within ``1e-6`` of a kink and matchings with tied optima are
    redrawn, so only smooth points are checked.
    """
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in losses}

    def box_pair():
        while True:
            p, g = _random_box(rng), _random_box(rng)
            if not box_tie(p, g):
                return p, g

    for _ in range(n_points):
        if "ptc" in worst:
            k, d = 8, 16
            p, t = rng.standard_normal((k, d)), rng.standard_normal((k, d))
            e1 = fd_check(lambda x: ptc_grad(x, t)[:2], p, h)
            e2 = fd_check(lambda x: (lambda r: (r[0], r[2]))(ptc_grad(p, x)), t, h)
            worst["ptc"] = max(worst["ptc"], e1, e2)
        if "infonce" in worst:
            s = rng.uniform(-1.0, 1.0, (8, 8))
            worst["infonce"] = max(worst["infonce"], fd_check(infonce_grad, s, h))
        if "sdm_kl" in worst:
            n = 8
            ids = rng.integers(0, 5, n)
            pos = ids[:, None] == ids[None, :]
            s = rng.uniform(-1.0, 1.0, (n, n))
            worst["sdm_kl"] = max(worst["sdm_kl"], fd_check(lambda x: sdm_kl_grad(x, pos), s, h))
        if "box" in worst:
            p, g = box_pair()
            worst["box"] = max(worst["box"], fd_check(lambda x: box_loss_grad(x, g), p, h))
        if "oim" in worst:
            d = 16
            bank = rng.standard_normal((20, d))
            bank /= np.linalg.norm(bank, axis=1, keepdims=True)
            tgt = int(rng.integers(0, 10))
            f = rng.standard_normal(d)
            f /= np.linalg.norm(f)
            e1 = fd_check(lambda x: oim_grad(x, bank, tgt), f, h)
            e2 = fd_check(lambda x: oim_direction_grad(x, bank, tgt), rng.standard_normal(d), h)
            worst["oim"] = max(worst["oim"], e1, e2)
        if "mue" in worst:
            while True:
                n, m = 5, int(rng.integers(1, 4))
                pairs = [box_pair() for _ in range(n)]
                pb = np.array([a for a, _ in pairs])
                gb = np.array([b for _, b in pairs[:m]])
                lg = rng.standard_normal((n, 2))
                cls = np.zeros(m, dtype=int)
                _, db, dl, match, tied = mue_grad(pb, lg, gb, cls)
                if tied or any(box_tie(pb[i], gb[j]) for i, j in match.pairs):
                    continue
                break
            e1 = fd_check(lambda x: mue_loss_arrays(x, lg, gb, cls, matching=match)[0], pb, h,
                          analytic=db)
            e2 = fd_check(lambda x: mue_loss_arrays(pb, x, gb, cls, matching=match)[0], lg, h,
                          analytic=dl)
            worst["mue"] = max(worst["mue"], e1, e2)
    return worst
