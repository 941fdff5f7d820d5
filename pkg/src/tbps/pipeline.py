"""Query-time search over a synthetic gallery.

Proposals, their pairwise fusion structure and per-candidate correctness are
query independent, so they are built once per world. Per query only the
confidences change; those are computed with the PUD/ReID operators and
cached across fusion weights and gallery sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics
from .errors import PreconditionError
from .fusion import pair_boxes
from .geometry import Box, iou_matrix
from .pud import cross_attend, region_scale
from .synthdata import World, generate_proposals, sub_rng


@dataclass(frozen=True)
class Toggles:
    """Pipeline switches mirroring the ablation axes."""

    mue: bool = True
    pud: bool = True
    instance_proto: bool = True
    nae: bool = True

    def __post_init__(self):
        if not (self.mue or self.pud):
            raise PreconditionError("at least one of the mue/pud paths must be enabled")

    def label(self) -> str:
        parts = []
        if self.mue:
            parts.append("mue")
        if self.pud:
            parts.append("pud*" if self.instance_proto else "pud")
        parts.append("nae" if self.nae else "oim")
        return "+".join(parts)

    @classmethod
    def from_dict(cls, d: dict) -> "Toggles":
        unknown = set(d) - {"mue", "pud", "instance_proto", "nae"}
        if unknown:
            raise PreconditionError(f"unknown toggle(s): {sorted(unknown)}")
        return cls(**d)


class _Channel:
    """Concatenated proposals of one channel over all scenes."""

    def __init__(self, sets):
        self.boxes = np.vstack([s.boxes for s in sets])
        self.det = np.concatenate([s.confidence for s in sets])
        self.features = np.vstack([s.features for s in sets])
        self.scene = np.concatenate([np.full(len(s), k, dtype=np.int64)
                                     for k, s in enumerate(sets)])
        offsets = np.cumsum([0] + [len(s) for s in sets])
        self.offsets = offsets

    def __len__(self):
        return len(self.boxes)


class SearchEngine:
    """Precomputed candidates for every scene of a world."""

    def __init__(self, world: World, toggles: Toggles = Toggles(), mu: float = 0.5,
                 iou_threshold: float = 0.5):
        self.world = world
        self.toggles = toggles
        self.mu = mu
        self.iou_threshold = iou_threshold
        cfg = world.config
        mue_sets = [generate_proposals(s, cfg, "mue") for s in world.scenes]
        pud_sets = [generate_proposals(s, cfg, "pud") for s in world.scenes]
        self.mue = _Channel(mue_sets)
        self.pud = _Channel(pud_sets)
        self.n_scenes = len(world.scenes)

        # identity -> candidate indices that localize that identity
        self.hits = {"mue": {}, "pud": {}}
        for name, sets in (("mue", mue_sets), ("pud", pud_sets)):
            chan = getattr(self, name)
            for k, (scene, ps) in enumerate(zip(world.scenes, sets)):
                if not len(ps) or not len(scene.boxes):
                    continue
                ov = iou_matrix(ps.boxes, scene.boxes) >= iou_threshold
                for c, p in zip(*np.nonzero(ov)):
                    ident = int(scene.identities[p])
                    self.hits[name].setdefault(ident, []).append(chan.offsets[k] + c)

        pm, pp, pi, ps_ = [], [], [], []
        for k in range(self.n_scenes):
            a0, a1 = self.mue.offsets[k], self.mue.offsets[k + 1]
            b0, b1 = self.pud.offsets[k], self.pud.offsets[k + 1]
            for i, j, ov in pair_boxes(self.mue.boxes[a0:a1], self.pud.boxes[b0:b1],
                                       iou_threshold):
                pm.append(a0 + i)
                pp.append(b0 + j)
                pi.append(ov)
                ps_.append(k)
        self.pair_mue = np.array(pm, dtype=np.int64)
        self.pair_pud = np.array(pp, dtype=np.int64)
        self.pair_iou = np.array(pi, dtype=np.float64)
        self.pair_scene = np.array(ps_, dtype=np.int64)
        nopair = np.ones(self.n_scenes, dtype=bool)
        nopair[self.pair_scene] = False
        self.fb_mue = np.flatnonzero(nopair[self.mue.scene])
        self.fb_pud = np.flatnonzero(nopair[self.pud.scene])
        self._conf_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._gallery_cache: dict[int, tuple[list[int], np.ndarray]] = {}

    # -- per-query confidences --------------------------------------------

    def confidences(self, query_index: int) -> tuple[np.ndarray, np.ndarray]:
        """``(c_mue, c_pud)`` for every candidate of the world."""
        if query_index in self._conf_cache:
            return self._conf_cache[query_index]
        text = self.world.queries[query_index].text[None, :]
        fv = self.mue.features
        cos = np.clip(fv @ text[0] / np.linalg.norm(text[0]), -1.0, 1.0)
        c_mue = np.exp(-(1.0 - cos) / (2.0 * self.mu ** 2))
        fp = self.pud.features
        salient = cross_attend(fp, text)
        c_pud = region_scale(fp, salient, self.mu)
        if self.toggles.nae:
            c_mue = c_mue * self.mue.det
            c_pud = c_pud * self.pud.det
        self._conf_cache[query_index] = (c_mue, c_pud)
        return c_mue, c_pud

    # -- galleries ---------------------------------------------------------

    def gallery(self, query_index: int, size: int) -> tuple[list[int], np.ndarray]:
        """``(positive scenes, gallery scene ids)`` for one query.

        Galleries are nested: a larger size only appends distractors, so
        results for a subset of sizes never depend on the others.
        """
        q = self.world.queries[query_index]
        cfg = self.world.config
        if query_index not in self._gallery_cache:
            pos = list(self.world.scenes_with(q.identity))
            pos = [pos[i] for i in sub_rng(cfg.seed, "positives", q.query_id).permutation(len(pos))]
            pos = sorted(pos[:cfg.max_positives])
            target = set(self.world.scenes_with(q.identity))
            others = np.array([s for s in range(self.n_scenes) if s not in target], dtype=np.int64)
            others = others[sub_rng(cfg.seed, "distractors", q.query_id).permutation(len(others))]
            self._gallery_cache[query_index] = (pos, others)
        pos, others = self._gallery_cache[query_index]
        need = size - len(pos)
        if need > len(others):
            raise PreconditionError(
                f"gallery_size={size} exceeds the {len(pos) + len(others)} scenes available")
        return pos, np.concatenate([np.array(pos, dtype=np.int64), others[:max(need, 0)]])

    # -- ranking -----------------------------------------------------------

    def _correct(self, name: str, identity: int) -> np.ndarray:
        chan = getattr(self, name)
        flags = np.zeros(len(chan), dtype=bool)
        idx = self.hits[name].get(identity)
        if idx:
            flags[np.asarray(idx)] = True
        return flags

    @staticmethod
    def _segment_best(scores: np.ndarray, scenes: np.ndarray, n_scenes: int):
        best = np.full(n_scenes, -np.inf)
        arg = np.full(n_scenes, -1, dtype=np.int64)
        if len(scores):
            order = np.lexsort((-scores, scenes))
            _, first = np.unique(scenes[order], return_index=True)
            winners = order[first]
            best[scenes[winners]] = scores[winners]
            arg[scenes[winners]] = winners
        return best, arg

    def ranked_items(self, query_index: int, beta: float):
        """All scorable items for a query over the whole world.

        Returns ``(scene, score, correct, channel, candidate)`` arrays where
        ``channel`` is 0 for a MUE box and 1 for a PUD box.
        """
        if not 0.0 <= beta <= 1.0:
            raise PreconditionError("beta must lie in [0, 1]")
        ident = self.world.queries[query_index].identity
        c_mue, c_pud = self.confidences(query_index)
        ok_mue, ok_pud = self._correct("mue", ident), self._correct("pud", ident)
        t = self.toggles
        if t.mue and not t.pud:
            n = len(self.mue)
            return (self.mue.scene, c_mue, ok_mue, np.zeros(n, dtype=np.int8), np.arange(n))
        if t.pud and not t.mue:
            n = len(self.pud)
            return (self.pud.scene, c_pud, ok_pud, np.ones(n, dtype=np.int8), np.arange(n))

        ci, cj = c_mue[self.pair_mue], c_pud[self.pair_pud]
        score = (1.0 - beta) * ci + beta * cj
        use_mue = ci >= cj
        channel = np.where(use_mue, 0, 1).astype(np.int8)
        cand = np.where(use_mue, self.pair_mue, self.pair_pud)
        correct = np.where(use_mue, ok_mue[self.pair_mue], ok_pud[self.pair_pud])

        # scenes without any matched pair fall back to the best weighted single box
        bm, am = self._segment_best((1.0 - beta) * c_mue[self.fb_mue],
                                    self.mue.scene[self.fb_mue], self.n_scenes)
        bp, ap = self._segment_best(beta * c_pud[self.fb_pud],
                                    self.pud.scene[self.fb_pud], self.n_scenes)
        has = np.flatnonzero((am >= 0) | (ap >= 0))
        pick_mue = bm[has] >= bp[has]
        fb_score = np.where(pick_mue, bm[has], bp[has])
        cand_m = self.fb_mue[am[has]] if len(self.fb_mue) else np.zeros(len(has), np.int64)
        cand_p = self.fb_pud[ap[has]] if len(self.fb_pud) else np.zeros(len(has), np.int64)
        fb_cand = np.where(pick_mue, cand_m, cand_p)
        fb_correct = np.where(pick_mue, ok_mue[cand_m] if len(ok_mue) else False,
                              ok_pud[cand_p] if len(ok_pud) else False)
        fb_channel = np.where(pick_mue, 0, 1).astype(np.int8)
        return (np.concatenate([self.pair_scene, has]),
                np.concatenate([score, fb_score]),
                np.concatenate([correct, fb_correct]),
                np.concatenate([channel, fb_channel]),
                np.concatenate([cand, fb_cand]))

    def rank_query(self, query_index: int, beta: float, gallery_size: int):
        """Gallery-restricted ranking with credit-once hit flags.

        Ordering: score descending, then gallery (scene) id, then item order.
        """
        pos, gallery = self.gallery(query_index, gallery_size)
        scene, score, correct, channel, cand = self.ranked_items(query_index, beta)
        member = np.zeros(self.n_scenes, dtype=bool)
        member[gallery] = True
        keep = np.flatnonzero(member[scene])
        order = keep[np.lexsort((keep, scene[keep], -score[keep]))]
        flags = correct[order].copy()
        # credit each target box once: only the first hit per scene counts
        hit_idx = np.flatnonzero(flags)
        if len(hit_idx):
            _, first = np.unique(scene[order][hit_idx], return_index=True)
            credited = np.zeros_like(flags)
            credited[hit_idx[first]] = True
            flags = credited
        return {"order": order, "flags": flags, "n_gt": len(pos), "scene": scene[order],
                "score": score[order], "channel": channel[order], "cand": cand[order]}

    def evaluate(self, beta: float, gallery_size: int, ks=(1, 5, 10)) -> dict:
        aps, firsts = [], []
        for qi in range(len(self.world.queries)):
            r = self.rank_query(qi, beta, gallery_size)
            aps.append(metrics.ap_from_relevance(r["flags"], r["n_gt"]))
            firsts.append(metrics.first_hit_rank(r["flags"]))
        out = {"mAP": float(np.mean(aps)) if aps else 0.0}
        for k in ks:
            out[f"top{k}"] = metrics.cmc_from_ranks(firsts, k)
        return out

    def query_result(self, query_index: int, beta: float, gallery_size: int) -> metrics.QueryResult:
        """Object form of :meth:`rank_query` for export and cross-checking."""
        r = self.rank_query(query_index, beta, gallery_size)
        q = self.world.queries[query_index]
        ranked = []
        for sc, s, ch, c in zip(r["scene"], r["score"], r["channel"], r["cand"]):
            boxes = self.mue.boxes if ch == 0 else self.pud.boxes
            ranked.append((int(sc), Box.from_array(boxes[c]), float(s)))
        gt = []
        for sid in self.gallery(query_index, gallery_size)[0]:
            scene = self.world.scenes[sid]
            k = int(np.flatnonzero(scene.identities == q.identity)[0])
            gt.append((sid, Box.from_array(scene.boxes[k])))
        return metrics.QueryResult(q.query_id, ranked, gt)


def feature_db(world: World) -> tuple[float, float]:
    """Davies-Bouldin index of L2-normalized labeled image and text features."""
    img, img_ids = world.labeled_persons()
    txt, txt_ids = world.text_matrix()
    img = img / np.linalg.norm(img, axis=1, keepdims=True)
    txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
    return metrics.davies_bouldin(img, img_ids), metrics.davies_bouldin(txt, txt_ids)
