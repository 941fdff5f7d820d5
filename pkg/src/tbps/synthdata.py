"""Seeded synthetic world: identities, scenes with ground-truth boxes, text
queries behind a modality gap, and two noisy proposal channels.

Every random draw comes from a named sub-stream of the master seed, so a
scene's content depends only on ``(seed, scene_id)`` and worlds are
bit-identical across runs and process layouts.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import PreconditionError
from .fusion import ScoredCandidate, Source
from .geometry import Box, iou_matrix

CHANNELS = ("mue", "pud")
MIN_SIDE = 0.01


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def sub_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for the named sub-stream ``keys`` of ``seed``."""
    spawn = tuple(stream_key(k) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))


@dataclass
class GenConfig:
    dim: int = 256
    n_identities: int = 50
    n_bystanders: int = 200
    n_scenes: int = 200
    persons_min: int = 2
    persons_max: int = 4
    labeled_fraction: float = 0.6
    queries_per_identity: int = 2
    visual_noise: float = 0.1
    text_noise: float = 0.1
    modality_gap: float = 0.5
    box_jitter: float = 0.02
    gallery_size: int = 100
    max_positives: int = 3
    # proposal channels: detection-style (mue) and text-conditioned (pud)
    mue_miss_rate: float = 0.05
    mue_fp_rate: float = 0.3
    mue_conf_base: float = 0.3
    mue_conf_gain: float = 0.6
    mue_conf_noise: float = 0.15
    mue_feat_noise: float = 0.1
    pud_miss_rate: float = 0.15
    pud_fp_rate: float = 0.1
    pud_conf_base: float = 0.3
    pud_conf_gain: float = 0.6
    pud_conf_noise: float = 0.1
    pud_feat_noise: float = 0.1
    seed: int = 0

    def validate(self) -> "GenConfig":
        rates = ["labeled_fraction"] + [f"{c}_{r}" for c in CHANNELS
                                        for r in ("miss_rate", "fp_rate")]
        for name in rates:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PreconditionError(f"{name}={v} must lie in [0, 1]")
        sigmas = ["visual_noise", "text_noise", "modality_gap", "box_jitter"] + [
            f"{c}_{s}" for c in CHANNELS for s in ("conf_noise", "feat_noise")]
        for name in sigmas:
            if not getattr(self, name) >= 0.0:
                raise PreconditionError(f"{name} must be non-negative")
        if self.dim < 2:
            raise PreconditionError("dim must be at least 2")
        for name in ("n_identities", "n_scenes", "persons_min", "queries_per_identity",
                     "gallery_size", "max_positives"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"{name} must be at least 1")
        if self.n_bystanders < 0:
            raise PreconditionError("n_bystanders must be non-negative")
        if self.persons_max < self.persons_min:
            raise PreconditionError("persons_max must be >= persons_min")
        if self.persons_max > 8:
            raise PreconditionError("persons_max above 8 does not fit the scene layout")
        # a scene never repeats an identity, so both pools must cover a full scene
        if self.n_identities < self.persons_max:
            raise PreconditionError("n_identities must be at least persons_max")
        if 0 < self.n_bystanders < self.persons_max:
            raise PreconditionError("n_bystanders must be 0 or at least persons_max")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown GenConfig field(s): {sorted(unknown)}")
        return cls(**d).validate()


def default_benchmark(**overrides) -> GenConfig:
    """The desk-scale benchmark: 50 identities, 200 scenes, D=64."""
    base = dict(dim=64, n_identities=50, n_scenes=200)
    base.update(overrides)
    return GenConfig(**base).validate()


@dataclass
class Scene:
    scene_id: int
    identities: np.ndarray  # (k,) int; ids >= n_identities are bystanders
    boxes: np.ndarray  # (k, 4) corners
    embeddings: np.ndarray  # (k, D) unit rows

    @property
    def persons(self) -> list[tuple[int, Box, np.ndarray]]:
        return [(int(i), Box.from_array(b), e)
                for i, b, e in zip(self.identities, self.boxes, self.embeddings)]


@dataclass
class Query:
    query_id: int
    identity: int
    text: np.ndarray  # (D,) unit


@dataclass
class World:
    config: GenConfig
    scenes: list[Scene]
    queries: list[Query]
    latents: np.ndarray | None = None
    rotation: np.ndarray | None = None
    _scene_index: dict = field(default_factory=dict, repr=False)

    def is_labeled(self, identity: int) -> bool:
        return 0 <= identity < self.config.n_identities

    def scenes_with(self, identity: int) -> list[int]:
        if not self._scene_index:
            idx: dict[int, list[int]] = {}
            for s in self.scenes:
                for i in s.identities:
                    idx.setdefault(int(i), []).append(s.scene_id)
            self._scene_index.update(idx)
        return self._scene_index.get(identity, [])

    def labeled_persons(self) -> tuple[np.ndarray, np.ndarray]:
        """``(embeddings, identities)`` of every labeled person in scene order."""
        feats, ids = [], []
        for s in self.scenes:
            keep = s.identities < self.config.n_identities
            feats.append(s.embeddings[keep])
            ids.append(s.identities[keep])
        return np.vstack(feats), np.concatenate(ids)

    def text_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.vstack([q.text for q in self.queries]),
                np.array([q.identity for q in self.queries]))

    def with_embeddings(self, person_embeddings: list[np.ndarray],
                        query_texts: np.ndarray) -> "World":
        scenes = [Scene(s.scene_id, s.identities, s.boxes, e)
                  for s, e in zip(self.scenes, person_embeddings)]
        queries = [Query(q.query_id, q.identity, t) for q, t in zip(self.queries, query_texts)]
        return World(self.config, scenes, queries, self.latents, self.rotation)

    # -- JSON-lines serialization ------------------------------------------

    def iter_records(self) -> Iterator[dict]:
        yield {"type": "header", "format": "tbps-synth/1", "config": self.config.to_dict()}
        for s in self.scenes:
            yield {"type": "scene", "scene_id": s.scene_id,
                   "persons": [{"identity": int(i), "box": b.tolist(), "embedding": e.tolist()}
                               for i, b, e in zip(s.identities, s.boxes, s.embeddings)]}
        for q in self.queries:
            yield {"type": "query", "query_id": q.query_id, "identity": q.identity,
                   "text": q.text.tolist()}

    def dumps(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.iter_records())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "World":
        with open(path) as fh:
            return cls.loads(fh.read())

    @classmethod
    def loads(cls, text: str) -> "World":
        config, scenes, queries = None, [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "header":
                config = GenConfig.from_dict(rec["config"])
            elif kind == "scene":
                if config is None:
                    raise PreconditionError("scene record before the header record")
                ps = rec["persons"]
                dim = config.dim
                scenes.append(Scene(
                    rec["scene_id"],
                    np.array([p["identity"] for p in ps], dtype=np.int64),
                    np.array([p["box"] for p in ps], dtype=np.float64).reshape(-1, 4),
                    np.array([p["embedding"] for p in ps], dtype=np.float64).reshape(-1, dim)))
            elif kind == "query":
                queries.append(Query(rec["query_id"], rec["identity"],
                                     np.asarray(rec["text"], dtype=np.float64)))
            else:
                raise PreconditionError(f"unknown record type {kind!r}")
        if config is None:
            raise PreconditionError("dataset has no header record")
        return cls(config, scenes, queries)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def modality_rotation(dim: int, gap: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal polar factor of ``I + gap * G / sqrt(D)``; identity at ``gap=0``."""
    if gap == 0:
        return np.eye(dim)
    a = np.eye(dim) + gap * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    u, _, vt = np.linalg.svd(a)
    return u @ vt


def _layout(rng: np.random.Generator, k: int) -> np.ndarray:
    """Up to ``k`` pedestrian-shaped boxes with pairwise IoU below 0.3."""
    boxes: list[np.ndarray] = []
    for _ in range(200):
        if len(boxes) == k:
            break
        w = rng.uniform(0.08, 0.2)
        h = rng.uniform(0.25, 0.5)
        x1 = rng.uniform(0.0, 1.0 - w)
        y1 = rng.uniform(0.0, 1.0 - h)
        cand = np.array([x1, y1, x1 + w, y1 + h])
        if boxes and iou_matrix(cand, np.array(boxes)).max() >= 0.3:
            continue
        boxes.append(cand)
    return np.array(boxes).reshape(-1, 4)


def _identity_plan(config: GenConfig) -> list[list[int]]:
    """Identity per person slot, scene by scene.

    Labeled slots cycle through reshuffled permutations of the known
    identities so that every identity appears before any repeats.
    """
    rng = sub_rng(config.seed, "identity-plan")
    counts = rng.integers(config.persons_min, config.persons_max + 1, size=config.n_scenes)
    labeled = rng.random(counts.sum()) < config.labeled_fraction
    cycle: list[int] = []
    plan, pos = [], 0
    for c in counts:
        ids: list[int] = []
        for _ in range(c):
            if labeled[pos] or config.n_bystanders == 0:
                if not cycle:
                    cycle = list(rng.permutation(config.n_identities))
                # one appearance per identity per scene
                pick = next((k for k, v in enumerate(cycle) if v not in ids), None)
                if pick is None:
                    cycle += list(rng.permutation(config.n_identities))
                    pick = next(k for k, v in enumerate(cycle) if v not in ids)
                ids.append(int(cycle.pop(pick)))
            else:
                by = config.n_identities + int(rng.integers(config.n_bystanders))
                while by in ids:
                    by = config.n_identities + int(rng.integers(config.n_bystanders))
                ids.append(by)
            pos += 1
        plan.append(ids)
    return plan


def generate_world(config: GenConfig) -> World:
    """Deterministic world for ``config``; equal configs give bit-identical worlds."""
    config.validate()
    d = config.dim
    n_total = config.n_identities + config.n_bystanders
    latents = _normalize_rows(sub_rng(config.seed, "latents").standard_normal((n_total, d)))
    rotation = modality_rotation(d, config.modality_gap, sub_rng(config.seed, "rotation"))

    scenes = []
    for sid, ids in enumerate(_identity_plan(config)):
        rng = sub_rng(config.seed, "scene", sid)
        boxes = _layout(rng, len(ids))
        ids = np.array(ids[:len(boxes)], dtype=np.int64)
        noise = rng.standard_normal((len(ids), d)) * config.visual_noise
        emb = _normalize_rows(latents[ids] + noise)
        scenes.append(Scene(sid, ids, boxes, emb))

    present = sorted({int(i) for s in scenes for i in s.identities if i < config.n_identities})
    queries = []
    for ident in present:
        rng = sub_rng(config.seed, "query", ident)
        for _ in range(config.queries_per_identity):
            noise = rng.standard_normal(d) * config.text_noise
            text = rotation @ latents[ident] + noise
            queries.append(Query(len(queries), ident, text / np.linalg.norm(text)))
    return World(config, scenes, queries, latents, rotation)


@dataclass
class ProposalSet:
    """One channel's proposals for one scene.

    ``person`` holds the index of the scene person a proposal was derived
    from, or -1 for a false positive. ``noise`` is kept so features can be
    recomputed after the underlying embeddings change.
    """

    source: Source
    boxes: np.ndarray
    confidence: np.ndarray
    person: np.ndarray
    noise: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def candidates(self) -> list[ScoredCandidate]:
        return [ScoredCandidate(Box.from_array(b), float(c), self.source)
                for b, c in zip(self.boxes, self.confidence)]


def _clamp_box(b: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = np.clip(b, 0.0, 1.0)
    if x2 - x1 < MIN_SIDE:
        cx = min(max((x1 + x2) / 2, MIN_SIDE / 2), 1 - MIN_SIDE / 2)
        x1, x2 = cx - MIN_SIDE / 2, cx + MIN_SIDE / 2
    if y2 - y1 < MIN_SIDE:
        cy = min(max((y1 + y2) / 2, MIN_SIDE / 2), 1 - MIN_SIDE / 2)
        y1, y2 = cy - MIN_SIDE / 2, cy + MIN_SIDE / 2
    return np.array([x1, y1, x2, y2])


def channel_params(config: GenConfig, channel: str) -> dict:
    if channel not in CHANNELS:
        raise PreconditionError(f"unknown proposal channel {channel!r}")
    names = ("miss_rate", "fp_rate", "conf_base", "conf_gain", "conf_noise", "feat_noise")
    return {n: getattr(config, f"{channel}_{n}") for n in names}


def proposal_features(embeddings: np.ndarray, person: np.ndarray, noise: np.ndarray,
                      feat_noise: float) -> np.ndarray:
    base = np.zeros_like(noise)
    true = person >= 0
    base[true] = embeddings[person[true]]
    # false positives carry background features: pure noise direction
    scale = np.where(true, feat_noise, 1.0)[:, None]
    return _normalize_rows(base + scale * noise)


def generate_proposals(scene: Scene, config: GenConfig, channel: str = "mue") -> ProposalSet:
    """Jittered detections of the scene's people plus false positives.

    Confidence is ``clip(base + gain * IoU(proposal, nearest GT) + noise, 0, 1)``;
    each channel draws from its own sub-stream.
    """
    p = channel_params(config, channel)
    rng = sub_rng(config.seed, "proposals", channel, scene.scene_id)
    d = scene.embeddings.shape[1]
    boxes, person = [], []
    for k, gt in enumerate(scene.boxes):
        missed = rng.random() < p["miss_rate"]
        jitter = rng.standard_normal(4) * config.box_jitter
        if not missed:
            boxes.append(_clamp_box(gt + jitter))
            person.append(k)
    for _ in range(len(scene.boxes)):
        has_fp = rng.random() < p["fp_rate"]
        w, h = rng.uniform(0.05, 0.2), rng.uniform(0.1, 0.5)
        x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        if has_fp:
            boxes.append(np.array([x1, y1, x1 + w, y1 + h]))
            person.append(-1)
    boxes_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    person_arr = np.array(person, dtype=np.int64)
    n = len(boxes_arr)
    conf_noise = rng.standard_normal(n) * p["conf_noise"]
    feat_noise = rng.standard_normal((n, d))
    if n and len(scene.boxes):
        best = iou_matrix(boxes_arr, scene.boxes).max(axis=1)
    else:
        best = np.zeros(n)
    conf = np.clip(p["conf_base"] + p["conf_gain"] * best + conf_noise, 0.0, 1.0)
    feats = proposal_features(scene.embeddings, person_arr, feat_noise, p["feat_noise"])
    return ProposalSet(Source(channel), boxes_arr, conf, person_arr, feat_noise, feats)
