"""Toy trainer: plain gradient descent on free per-item parameters.

The encoders are replaced by one free embedding per scene person and per
query text. Every loss surface of the framework is exercised:

* ReID: SDM + InfoNCE on one (box, text) pair per identity, plus OIM of
  every labeled box and text against the lookup table and circular queue.
* PUD: prototype/text contrast and box regression through the fused
  multimodal feature into the affine box head (gradients to the head and
  to ``mu``; the pooled text weights are held constant).
* MUE: Hungarian-matched set loss on free per-scene slot logits.

The three module losses are combined with :class:`LossWeights`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .assignment import PERSON, matching_cost, solve_assignment
from .errors import PreconditionError
from .geometry import box_loss_matrix
from .numgrad import (LossWeights, box_loss_grad, corners_from_logits_grad, cosine_backward,
                      infonce_grad, mue_grad, normalize_backward, oim_grad, ptc_grad,
                      sdm_kl_grad, total_loss)
from .pud import BoxHead, PrototypeBank, cross_attend, relevance_pool
from .reid import CircularQueue, LookupTable, build_lut
from .synthdata import World, sub_rng


DIVERGENCE_LIMIT = 1e100


class DivergenceError(RuntimeError):
    """Raised when a loss or parameter becomes non-finite."""


@dataclass
class TrainConfig:
    lr: float = 0.05
    rho: float = 0.02
    eps_itc: float = 0.07
    eps_kl: float = 1e-8
    oim_temp: float = 0.07
    lut_momentum: float = 0.5
    cq_capacity: int = 500
    n_prototypes: int = 128
    proto_momentum: float = 0.9
    tau: float = 0.07
    mu: float = 0.5
    instance_proto: bool = True
    slots: int = 6
    no_object_weight: float = 0.1
    scenes_per_step: int = 16
    adaptive: bool = True
    text_updates_lut: bool = True  # False: text features only score against the LUT
    log_every: int = 10
    seed: int = 0

    def validate(self) -> "TrainConfig":
        positive = ("rho", "eps_itc", "eps_kl", "oim_temp", "tau", "mu")
        for name in positive:
            if not getattr(self, name) > 0:
                raise PreconditionError(f"TrainConfig.{name} must be positive")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise PreconditionError("TrainConfig.lr must be finite and non-negative")
        for name in ("cq_capacity", "n_prototypes", "slots", "scenes_per_step", "log_every"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"TrainConfig.{name} must be at least 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PreconditionError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrainState:
    visual: np.ndarray  # (n_persons, D) raw box embeddings
    text: np.ndarray  # (n_queries, D) raw text embeddings
    mu: float
    head: BoxHead
    slot_boxes: np.ndarray  # (n_scenes, slots, 4) center-size logits
    slot_logits: np.ndarray  # (n_scenes, slots, 2)
    step: int = 0
    lr: float = 0.05
    history: list = field(default_factory=list)

    def check_finite(self) -> None:
        arrays = (self.visual, self.text, self.head.weight, self.head.bias,
                  self.slot_boxes, self.slot_logits)
        if not (math.isfinite(self.mu) and all(np.all(np.isfinite(a)) for a in arrays)):
            raise DivergenceError(f"non-finite parameters after step {self.step}")
        # squared norms of larger values overflow before they turn non-finite
        if max(float(np.abs(a).max(initial=0.0)) for a in arrays) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"parameters exceed {DIVERGENCE_LIMIT:g} after step {self.step}")


@dataclass
class TrainResult:
    state: TrainState
    bank: PrototypeBank
    lut: LookupTable
    cq: CircularQueue
    weights: LossWeights
    curves: list[dict]

    def world(self, world: World) -> World:
        """``world`` with its embeddings replaced by the trained ones."""
        return world.with_embeddings(*_split_embeddings(world, self.state))

    def write_curves(self, path) -> None:
        write_curves(path, self.curves)

    def save(self, directory) -> None:
        """Checkpoint: arrays as ``state.npz``, banks and scalars as JSON."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        s = self.state
        np.savez(d / "state.npz", visual=s.visual, text=s.text, head_weight=s.head.weight,
                 head_bias=s.head.bias, slot_boxes=s.slot_boxes, slot_logits=s.slot_logits)
        meta = {"step": s.step, "lr": s.lr, "mu": s.mu,
                "alphas": self.weights.alphas.tolist(),
                "ema": None if self.weights.ema is None else self.weights.ema.tolist(),
                "bank": json.loads(self.bank.to_json()),
                "lut": self.lut.to_dict(), "cq": self.cq.to_dict()}
        (d / "checkpoint.json").write_text(json.dumps(meta))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _split_embeddings(world: World, state: TrainState):
    sizes = np.cumsum([0] + [len(s.identities) for s in world.scenes])
    v = _unit_rows(state.visual)
    return [v[sizes[k]:sizes[k + 1]] for k in range(len(world.scenes))], _unit_rows(state.text)


class _Index:
    """Flat indexing of the world's persons and queries."""

    def __init__(self, world: World):
        n_id = world.config.n_identities
        self.identity = np.concatenate([s.identities for s in world.scenes])
        self.scene = np.concatenate([np.full(len(s.identities), s.scene_id) for s in world.scenes])
        self.boxes = np.vstack([s.boxes for s in world.scenes])
        self.offsets = np.cumsum([0] + [len(s.identities) for s in world.scenes])
        self.labeled = np.flatnonzero(self.identity < n_id)
        self.bystander = np.flatnonzero(self.identity >= n_id)
        self.query_identity = np.array([q.identity for q in world.queries])
        present = sorted(set(self.identity[self.labeled].tolist()) &
                         set(self.query_identity.tolist()))
        self.ids = np.array(present, dtype=np.int64)
        self.boxes_of = {int(i): self.labeled[self.identity[self.labeled] == i] for i in present}
        self.texts_of = {int(i): np.flatnonzero(self.query_identity == i) for i in present}


def init_state(world: World, config: TrainConfig) -> TrainState:
    rng = sub_rng(config.seed, "train-init")
    visual = np.vstack([s.embeddings for s in world.scenes]).astype(np.float64)
    text = np.vstack([q.text for q in world.queries]).astype(np.float64)
    n = len(world.scenes)
    slot_boxes = rng.standard_normal((n, config.slots, 4)) * 0.5
    slot_boxes[..., 2:] -= 1.5  # start small
    return TrainState(visual=visual.copy(), text=text.copy(), mu=config.mu,
                      head=BoxHead(rng.standard_normal((world.config.dim, 5)) * 0.01, np.zeros(5)),
                      slot_boxes=slot_boxes, slot_logits=np.zeros((n, config.slots, 2)),
                      lr=config.lr)


def _db(world: World, state: TrainState, index: _Index) -> tuple[float, float]:
    v = _unit_rows(state.visual[index.labeled])
    t = _unit_rows(state.text)
    return (metrics.davies_bouldin(v, index.identity[index.labeled]),
            metrics.davies_bouldin(t, index.query_identity))


class _Step:
    """Loss values and gradients for one step, with discrete choices frozen."""

    def __init__(self, world, state, config, index, bank, lut, cq, rng):
        self.world, self.state, self.config, self.index = world, state, config, index
        self.bank, self.lut, self.cq = bank, lut, cq
        self.g_visual = np.zeros_like(state.visual)
        self.g_text = np.zeros_like(state.text)
        self.g_head_w = np.zeros_like(state.head.weight)
        self.g_head_b = np.zeros_like(state.head.bias)
        self.g_mu = 0.0
        self.g_slot_boxes = np.zeros_like(state.slot_boxes)
        self.g_slot_logits = np.zeros_like(state.slot_logits)
        ids = index.ids
        self.batch_boxes = np.array([rng.choice(index.boxes_of[int(i)]) for i in ids])
        self.batch_texts = np.array([rng.choice(index.texts_of[int(i)]) for i in ids])
        n_sc = min(config.scenes_per_step, len(world.scenes))
        self.batch_scenes = np.sort(rng.choice(len(world.scenes), n_sc, replace=False))
        self.updates = {}

    # each method returns {name: loss} and accumulates gradients scaled by ``w``

    def reid(self, w: float) -> dict:
        st, cfg, ix = self.state, self.config, self.index
        vb, tb = st.visual[self.batch_boxes], st.text[self.batch_texts]
        sim = _unit_rows(vb) @ _unit_rows(tb).T
        pos = np.eye(len(vb), dtype=bool)
        l_sdm, g_sdm = sdm_kl_grad(sim, pos, cfg.rho, cfg.eps_kl)
        l_itc, g_itc = infonce_grad(sim, cfg.eps_itc)
        dv, dt = cosine_backward(vb, tb, g_sdm + g_itc)
        np.add.at(self.g_visual, self.batch_boxes, w * dv)
        np.add.at(self.g_text, self.batch_texts, w * dt)

        bank = self.lut.matrix
        if len(self.cq):
            bank = np.vstack([bank, self.cq.matrix])
        l_oim = 0.0
        for rows, targets, grad in (
                (ix.labeled, ix.identity[ix.labeled], self.g_visual),
                (np.arange(len(st.text)), ix.query_identity, self.g_text)):
            x = st.visual[rows] if grad is self.g_visual else st.text[rows]
            u = _unit_rows(x)
            z = u @ bank.T / cfg.oim_temp
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            tgt = np.array([self.lut.index(int(t)) for t in targets])
            l_oim += float(-np.log(p[np.arange(len(u)), tgt]).mean())
            p[np.arange(len(u)), tgt] -= 1.0
            gu = p @ bank / (cfg.oim_temp * len(u))
            grad[rows] += w * normalize_backward(x, gu)
        return {"sdm": l_sdm, "itc": l_itc, "oim": l_oim, "reid": l_sdm + l_itc + l_oim}

    def pud(self, w: float) -> dict:
        st, cfg, ix = self.state, self.config, self.index
        vb, tb = st.visual[self.batch_boxes], st.text[self.batch_texts]
        vu = _unit_rows(vb)
        assigned = self.bank.assign(vu)
        protos = self.bank.prototypes[assigned]
        if cfg.instance_proto:
            protos = protos + vu
        l_ptc, dp, dt = ptc_grad(protos, tb, cfg.tau)
        np.add.at(self.g_text, self.batch_texts, w * dt)
        if cfg.instance_proto:
            np.add.at(self.g_visual, self.batch_boxes, w * normalize_backward(vb, dp))
        self.updates["bank"] = list(zip(assigned, vu))

        # box regression on the query's scenes; head and mu are trained
        reg, n_reg = 0.0, 0
        head = st.head
        mu = st.mu
        for qi, b in zip(self.batch_texts, self.batch_boxes):
            k = int(ix.scene[b])
            lo, hi = ix.offsets[k], ix.offsets[k + 1]
            fv = st.visual[lo:hi]
            gt = ix.boxes[lo:hi]
            text = st.text[qi][None, :]
            salient = cross_attend(fv, text)
            cos = np.clip(np.einsum("ij,ij->i", fv, salient) /
                          (np.linalg.norm(fv, axis=1) * np.linalg.norm(salient, axis=1)), -1, 1)
            scale = np.exp(-(1 - cos) / (2 * mu * mu))
            f_pro = fv * scale[:, None]
            pooled = relevance_pool(f_pro, text)
            th = np.tanh(f_pro)
            f_multi = th * pooled[None, :]
            logits = f_multi @ head.weight + head.bias
            corners, jac = corners_from_logits_grad(logits[:, :4])
            cost = box_loss_matrix(corners, gt)
            m = solve_assignment(cost)
            d_corners = np.zeros_like(corners)
            for i, j in m.pairs:
                li, gi = box_loss_grad(corners[i], gt[j])
                reg += li
                d_corners[i] += gi
            n_reg += 1
            d_logits = np.zeros_like(logits)
            d_logits[:, :4] = np.einsum("nj,nji->ni", d_corners, jac)
            self.g_head_w += w * f_multi.T @ d_logits / len(self.batch_texts)
            self.g_head_b += w * d_logits.sum(axis=0) / len(self.batch_texts)
            d_fm = d_logits @ head.weight.T
            d_fpro = d_fm * pooled[None, :] * (1 - th ** 2)
            d_scale = (d_fpro * fv).sum(axis=1)
            self.g_mu += w * float((d_scale * scale * (1 - cos) / mu ** 3).sum()) / len(self.batch_texts)
        reg /= max(n_reg, 1)
        return {"ptc": l_ptc, "pud_reg": reg, "pud": l_ptc + reg}

    def mue(self, w: float) -> dict:
        st, cfg, ix = self.state, self.config, self.index
        total = 0.0
        for k in self.batch_scenes:
            lo, hi = ix.offsets[k], ix.offsets[k + 1]
            gt = ix.boxes[lo:hi]
            classes = np.full(len(gt), PERSON)
            corners, jac = corners_from_logits_grad(st.slot_boxes[k])
            logits = st.slot_logits[k]
            m = solve_assignment(matching_cost(corners, logits, gt, classes))
            loss, d_boxes, d_logits, _, _ = mue_grad(corners, logits, gt, classes,
                                                     cfg.no_object_weight, matching=m)
            total += loss
            scale = w / len(self.batch_scenes)
            self.g_slot_boxes[k] += scale * np.einsum("nj,nji->ni", d_boxes, jac)
            self.g_slot_logits[k] += scale * d_logits
        return {"mue": total / len(self.batch_scenes)}


def write_curves(path, curves: list[dict]) -> None:
    if not curves:
        raise PreconditionError("no curve rows to write")
    keys = list(curves[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in curves:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def train_toy(world: World, config: TrainConfig | None = None, steps: int = 500) -> TrainResult:
    """Run ``steps`` of gradient descent; deterministic for a given seed.

    A curve row (losses, weights, Davies-Bouldin indices) is recorded every
    ``config.log_every`` steps and after the last one; ``L_total`` is also
    kept for every step in ``state.history``.
    """
    config = (config or TrainConfig()).validate()
    if steps < 1:
        raise PreconditionError("steps must be at least 1")
    index = _Index(world)
    if len(index.ids) < 2:
        raise PreconditionError("training needs at least two labeled identities with queries")
    state = init_state(world, config)
    rng = sub_rng(config.seed, "train-batches")
    bank = PrototypeBank.random(config.n_prototypes, world.config.dim, config.proto_momentum,
                                seed=int(sub_rng(config.seed, "bank").integers(2 ** 32)))
    init_v = _unit_rows(state.visual[index.labeled])
    lut = build_lut(index.ids.tolist(),
                    [init_v[index.identity[index.labeled] == i].mean(axis=0) for i in index.ids],
                    world.config.dim, config.lut_momentum)
    cq = CircularQueue(config.cq_capacity, world.config.dim)
    weights = LossWeights(adaptive=config.adaptive)
    curves: list[dict] = []

    for step in range(steps):
        s = _Step(world, state, config, index, bank, lut, cq, rng)
        alphas = weights.alphas.copy()
        norm = alphas / alphas.sum()
        parts = {}
        parts.update(s.mue(norm[0]))
        parts.update(s.pud(norm[1]))
        parts.update(s.reid(norm[2]))
        comps = (parts["mue"], parts["pud"], parts["reid"])
        l_total = total_loss(*comps, alphas)
        if not all(math.isfinite(v) for v in parts.values()):
            raise DivergenceError(f"non-finite loss at step {step}: {parts}")

        if step % config.log_every == 0:
            curves.append(_curve_row(step, l_total, parts, alphas, _db(world, state, index)))
        state.history.append(l_total)

        lr = state.lr
        state.visual -= lr * s.g_visual
        state.text -= lr * s.g_text
        state.head = BoxHead(state.head.weight - lr * s.g_head_w, state.head.bias - lr * s.g_head_b)
        state.mu = max(state.mu - lr * s.g_mu, 1e-3)
        state.slot_boxes -= lr * s.g_slot_boxes
        state.slot_logits -= lr * s.g_slot_logits
        state.step += 1
        state.check_finite()

        # state machines see the features the step was computed on
        bank.update(s.updates["bank"])
        vb = _unit_rows(state.visual[s.batch_boxes])
        tb = _unit_rows(state.text[s.batch_texts])
        for ident, fv, ft in zip(index.ids, vb, tb):
            lut.update(int(ident), fv)
            if config.text_updates_lut:
                lut.update(int(ident), ft)
        for k in s.batch_scenes:
            lo, hi = index.offsets[k], index.offsets[k + 1]
            for r in range(lo, hi):
                if index.identity[r] >= world.config.n_identities:
                    cq.push(_unit_rows(state.visual[r][None, :])[0])
        weights.observe(comps)

    # final snapshot
    s = _Step(world, state, config, index, bank, lut, cq, sub_rng(config.seed, "train-final"))
    norm = weights.normalized
    parts = {}
    parts.update(s.mue(norm[0]))
    parts.update(s.pud(norm[1]))
    parts.update(s.reid(norm[2]))
    l_total = total_loss(parts["mue"], parts["pud"], parts["reid"], weights)
    curves.append(_curve_row(steps, l_total, parts, weights.alphas, _db(world, state, index)))
    return TrainResult(state, bank, lut, cq, weights, curves)


def _curve_row(step, l_total, parts, alphas, db) -> dict:
    row = {"step": step, "total": float(l_total)}
    row.update({k: float(v) for k, v in parts.items()})
    row.update({f"alpha_{n}": float(a) for n, a in zip(("mue", "pud", "reid"), alphas)})
    row["db_image"], row["db_text"] = float(db[0]), float(db[1])
    return row


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
