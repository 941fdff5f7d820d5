"""Grid experiments: generate, optionally train, search, score, write CSV.

A work unit is one (toggle set, seed) pair. It builds its own world and
engine and evaluates every (beta, gallery size) grid point on them, so
units share no mutable state and can run in worker processes. Rows are
collected and written in grid order by the parent, which keeps
``results.csv`` byte-identical regardless of ``jobs``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PreconditionError
from .pipeline import SearchEngine, Toggles, feature_db
from .synthdata import GenConfig, default_benchmark, generate_world
from .train import TrainConfig, train_toy

RESULT_COLUMNS = ("exp_id", "seed", "beta", "gallery_size", "toggles", "mAP", "top1", "top5",
                  "top10", "db_image", "db_text", "config_hash", "build_id")
TABLE3_BETAS = (0.0, 0.3, 0.5, 0.8, 1.0)
FIG3_GALLERIES = (50, 100, 500, 1000, 2000, 4000)
# rows of the component ablation: plain OIM, +MUE, +PUD, then the full model
ABLATION_TOGGLES = (
    Toggles(mue=True, pud=False, instance_proto=False, nae=False),
    Toggles(mue=True, pud=False, instance_proto=False, nae=True),
    Toggles(mue=False, pud=True, instance_proto=True, nae=True),
    Toggles(mue=True, pud=True, instance_proto=False, nae=True),
    Toggles(mue=True, pud=True, instance_proto=True, nae=True),
)


def gallery_benchmark(**overrides) -> GenConfig:
    """Default benchmark with enough scenes for a 4000-image gallery."""
    base = dict(n_scenes=4500)
    base.update(overrides)
    return default_benchmark(**base)


@dataclass
class ExperimentConfig:
    gen: GenConfig = field(default_factory=default_benchmark)
    train: TrainConfig = field(default_factory=TrainConfig)
    toggles: list = field(default_factory=lambda: [Toggles()])
    betas: list = field(default_factory=lambda: [0.5])
    galleries: list = field(default_factory=lambda: [100])
    seeds: list = field(default_factory=lambda: [0])
    train_steps: int = 0
    mu: float = 0.5
    iou_threshold: float = 0.5
    out_dir: str = "results"
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        self.gen.validate()
        self.train.validate()
        for name in ("toggles", "betas", "galleries", "seeds"):
            if not getattr(self, name):
                raise PreconditionError(f"ExperimentConfig.{name} must be nonempty")
        for t in self.toggles:
            if not isinstance(t, Toggles):
                raise PreconditionError("ExperimentConfig.toggles must hold Toggles")
        for b in self.betas:
            if not 0.0 <= float(b) <= 1.0:
                raise PreconditionError(f"ExperimentConfig.betas: {b} outside [0, 1]")
        for g in self.galleries:
            if int(g) < 1:
                raise PreconditionError(f"ExperimentConfig.galleries: {g} must be positive")
            if int(g) > self.gen.n_scenes:
                raise PreconditionError(
                    f"ExperimentConfig.galleries: {g} exceeds gen.n_scenes={self.gen.n_scenes}")
        for s in self.seeds:
            if int(s) < 0:
                raise PreconditionError(f"ExperimentConfig.seeds: {s} must be non-negative")
        if self.train_steps < 0:
            raise PreconditionError("ExperimentConfig.train_steps must be non-negative")
        if not self.mu > 0:
            raise PreconditionError("ExperimentConfig.mu must be positive")
        if not 0.0 < self.iou_threshold < 1.0:
            raise PreconditionError("ExperimentConfig.iou_threshold must lie in (0, 1)")
        if self.jobs < 1:
            raise PreconditionError("ExperimentConfig.jobs must be at least 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["toggles"] = [asdict(t) for t in self.toggles]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PreconditionError(f"unknown ExperimentConfig field(s): {sorted(unknown)}")
        try:
            if "gen" in d:
                d["gen"] = GenConfig.from_dict({**default_benchmark().to_dict(), **d["gen"]})
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
            if "toggles" in d:
                raw = d["toggles"]
                d["toggles"] = [Toggles.from_dict(t) for t in ([raw] if isinstance(raw, dict) else raw)]
            for name in ("betas", "galleries", "seeds"):
                if name in d and not isinstance(d[name], list):
                    d[name] = [d[name]]
            cfg = cls(**d)
        except TypeError as exc:
            raise PreconditionError(f"invalid ExperimentConfig: {exc}") from None
        return cfg.validate()

    def config_hash(self) -> str:
        """Hash of everything that shapes a row except its own grid coordinates."""
        d = self.to_dict()
        for name in ("toggles", "betas", "galleries", "seeds", "out_dir", "jobs"):
            d.pop(name)
        d["gen"].pop("seed")
        d["train"].pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def build_id() -> str:
    """``<version>+<hash of the package sources>``, stable across runs of the same code."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:10]}"


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def exp_id(config_hash: str, toggles: Toggles, beta: float, gallery: int, seed: int) -> str:
    key = f"{config_hash}|{toggles.label()}|{_fmt(beta)}|{gallery}|{seed}"
    return hashlib.sha256(key.encode()).hexdigest()[:10]


def run_unit(config: ExperimentConfig, toggles: Toggles, seed: int) -> tuple[list[dict], float]:
    """All grid rows for one (toggle set, seed); returns ``(rows, wall_ms)``."""
    t0 = time.perf_counter()
    world = generate_world(replace(config.gen, seed=int(seed)))
    if config.train_steps > 0:
        tcfg = replace(config.train, seed=int(seed), instance_proto=toggles.instance_proto)
        world = train_toy(world, tcfg, config.train_steps).world(world)
    db_image, db_text = feature_db(world)
    engine = SearchEngine(world, toggles, mu=config.mu, iou_threshold=config.iou_threshold)
    chash, bid = config.config_hash(), build_id()
    rows = []
    for beta in config.betas:
        for g in config.galleries:
            m = engine.evaluate(float(beta), int(g))
            rows.append({
                "exp_id": exp_id(chash, toggles, float(beta), int(g), int(seed)),
                "seed": int(seed), "beta": _fmt(float(beta)), "gallery_size": int(g),
                "toggles": toggles.label(),
                "mAP": _fmt(m["mAP"]), "top1": _fmt(m["top1"]), "top5": _fmt(m["top5"]),
                "top10": _fmt(m["top10"]),
                "db_image": _fmt(db_image), "db_text": _fmt(db_text),
                "config_hash": chash, "build_id": bid,
            })
    return rows, (time.perf_counter() - t0) * 1000.0


def _unit_job(args):
    cfg_dict, toggles_dict, seed = args
    return run_unit(ExperimentConfig.from_dict(cfg_dict), Toggles(**toggles_dict), seed)


def run_experiment(config: ExperimentConfig) -> dict:
    """Run the full grid; writes ``results.csv``, ``summary.json`` and ``timings.csv``.

    Returns the summary dictionary.
    """
    config.validate()
    out = Path(config.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PreconditionError(f"output directory {out} is not writable: {exc}") from None

    units = [(t, int(s)) for t in config.toggles for s in config.seeds]
    if config.jobs > 1 and len(units) > 1:
        payload = config.to_dict()
        jobs = [(payload, asdict(t), s) for t, s in units]
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(units))) as pool:
            outputs = list(pool.map(_unit_job, jobs))
    else:
        outputs = [run_unit(config, t, s) for t, s in units]

    # grid order: toggles, beta, gallery, seed
    by_key = {}
    timings = []
    for (t, s), (rows, ms) in zip(units, outputs):
        timings.append({"toggles": t.label(), "seed": s, "wall_ms": f"{ms:.1f}"})
        for r in rows:
            by_key[(t.label(), r["beta"], r["gallery_size"], s)] = r
    ordered = [by_key[(t.label(), _fmt(float(b)), int(g), int(s))]
               for t in config.toggles for b in config.betas
               for g in config.galleries for s in config.seeds]

    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(ordered)
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("toggles", "seed", "wall_ms"), lineterminator="\n")
        w.writeheader()
        w.writerows(timings)
    summary = summarize_rows(ordered)
    summary["config"] = config.to_dict()
    summary["config_hash"] = config.config_hash()
    summary["build_id"] = build_id()
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def summarize_rows(rows: list[dict]) -> dict:
    """Means over seeds for every (toggles, beta, gallery size) point."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["toggles"], r["beta"], int(r["gallery_size"])), []).append(r)
    points = []
    for (tog, beta, g), rs in groups.items():
        point = {"toggles": tog, "beta": float(beta), "gallery_size": g, "n_seeds": len(rs)}
        for k in ("mAP", "top1", "top5", "top10", "db_image", "db_text"):
            point[k] = float(np.mean([float(r[k]) for r in rs]))
        points.append(point)
    return {"points": points}


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
