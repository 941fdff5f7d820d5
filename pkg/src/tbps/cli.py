"""``tbps`` command line: generate, train, evaluate, sweep, ablate, check.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .errors import PreconditionError
from .experiment import (ABLATION_TOGGLES, FIG3_GALLERIES, TABLE3_BETAS, ExperimentConfig,
                         gallery_benchmark, run_experiment)
from .numgrad import gradcheck_suite
from .pipeline import SearchEngine, feature_db
from .synthdata import World, generate_world
from .train import train_toy

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOL = 1e-4


class ConfigError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def load_config(path: str | None, base: dict | None = None) -> ExperimentConfig:
    d = dict(base or {})
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        if "gen" in loaded and "gen" in d:
            loaded["gen"] = {**d["gen"], **loaded["gen"]}
        d.update(loaded)
    try:
        return ExperimentConfig.from_dict(d)
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from None


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "beta", None):
        changes["betas"] = args.beta
    if getattr(args, "gallery", None):
        changes["galleries"] = args.gallery
    if getattr(args, "steps", None) is not None:
        changes["train_steps"] = args.steps
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "jobs", None) is not None:
        changes["jobs"] = args.jobs
    cfg = replace(cfg, **changes)
    try:
        return cfg.validate()
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from None


def _world(args, cfg: ExperimentConfig) -> World:
    if getattr(args, "data", None):
        try:
            return World.load(args.data)
        except FileNotFoundError:
            raise ConfigError(f"dataset {args.data} not found") from None
    return generate_world(replace(cfg.gen, seed=cfg.seeds[0]))


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    world = generate_world(replace(cfg.gen, seed=cfg.seeds[0]))
    path = _out(args, "data") / "world.jsonl"
    world.save(path)
    print(f"wrote {path} ({len(world.scenes)} scenes, {len(world.queries)} queries)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    world = _world(args, cfg)
    steps = args.steps if args.steps is not None else 500
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    tcfg = replace(cfg.train, seed=cfg.seeds[0], instance_proto=cfg.toggles[0].instance_proto)
    result = train_toy(world, tcfg, steps)
    out = _out(args, "train")
    result.write_curves(out / "curves.csv")
    result.save(out / "checkpoint")
    result.world(world).save(out / "trained_world.jsonl")
    first, last = result.curves[0], result.curves[-1]
    for side in ("image", "text"):
        a, b = first[f"db_{side}"], last[f"db_{side}"]
        print(f"db_{side}: {a:.4f} -> {b:.4f} ({100 * (b - a) / a:+.1f}%)")
    print(f"L_total: {first['total']:.4f} -> {last['total']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out(args, "eval")
    if args.predictions:
        try:
            results = metrics.read_predictions(args.predictions)
        except FileNotFoundError:
            raise ConfigError(f"predictions file {args.predictions} not found") from None
        summary = metrics.summarize(results)
    else:
        cfg = _apply_overrides(load_config(args.config), args)
        world = _world(args, cfg)
        engine = SearchEngine(world, cfg.toggles[0], mu=cfg.mu, iou_threshold=cfg.iou_threshold)
        beta, size = float(cfg.betas[0]), int(cfg.galleries[0])
        if size > len(world.scenes):
            raise ConfigError(f"gallery: {size} exceeds the {len(world.scenes)} scenes in the dataset")
        results = [engine.query_result(q, beta, size) for q in range(len(world.queries))]
        metrics.write_predictions(out / "predictions.jsonl", results)
        summary = metrics.summarize(results)
        summary["db_image"], summary["db_text"] = feature_db(world)
        summary.update(beta=beta, gallery_size=size, toggles=cfg.toggles[0].label())
    metrics.write_metrics(out / "metrics.csv", out / "metrics.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _sweep(args, base: dict, defaults: dict) -> int:
    cfg = load_config(args.config, base)
    cfg = replace(cfg, **{k: v for k, v in defaults.items() if not _given(args, k)})
    cfg = _apply_overrides(cfg, args)
    summary = run_experiment(cfg)
    for p in summary["points"]:
        print(f"{p['toggles']:<16} beta={p['beta']:.2f} G={p['gallery_size']:<5} "
              f"mAP={100 * p['mAP']:.2f} top1={100 * p['top1']:.2f} (n={p['n_seeds']})")
    print(f"wrote {Path(cfg.out_dir) / 'results.csv'}")
    return EXIT_OK


def _given(args, field_name: str) -> bool:
    flag = {"betas": "beta", "galleries": "gallery", "seeds": "seed",
            "train_steps": "steps"}.get(field_name)
    if flag and getattr(args, flag, None) is not None:
        return True
    return field_name in getattr(args, "_config_keys", set())


def cmd_sweep_beta(args) -> int:
    return _sweep(args, {}, {"betas": list(TABLE3_BETAS), "galleries": [100],
                             "seeds": list(range(5))})


def cmd_sweep_gallery(args) -> int:
    return _sweep(args, {"gen": gallery_benchmark().to_dict()},
                  {"betas": [0.5], "galleries": list(FIG3_GALLERIES), "seeds": list(range(5))})


def cmd_ablate(args) -> int:
    return _sweep(args, {}, {"toggles": list(ABLATION_TOGGLES), "betas": [0.5],
                             "galleries": [100], "seeds": list(range(5)), "train_steps": 100})


def cmd_gradcheck(args) -> int:
    worst = gradcheck_suite(args.points, seed=args.seed or 0)
    ok = True
    for name, err in worst.items():
        status = "PASS" if err < GRADCHECK_TOL else "FAIL"
        ok &= status == "PASS"
        print(f"{status} {name:<8} max rel err {err:.3e}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_selftest(args) -> int:
    """Small end-to-end smoke run of every stage."""
    from .assignment import solve_assignment
    import itertools
    import tempfile

    rng = np.random.default_rng(args.seed or 0)
    checks = []
    ok = True
    for _ in range(50):
        n = int(rng.integers(1, 6))
        c = rng.integers(0, 10, (n, n)).astype(float)
        best = min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        ok &= solve_assignment(c).total == best
    checks.append(("assignment", ok))
    worst = gradcheck_suite(5, seed=args.seed or 0)
    checks.append(("gradients", max(worst.values()) < GRADCHECK_TOL))
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig(betas=[0.0, 0.5], galleries=[50], seeds=[0], out_dir=tmp,
                               train_steps=5)
        summary = run_experiment(cfg)
        checks.append(("experiment", len(summary["points"]) == 2 and
                       (Path(tmp) / "results.csv").exists()))
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}")
    return EXIT_OK if all(p for _, p in checks) else EXIT_RUNTIME


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tbps {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="ExperimentConfig JSON file")
        p.add_argument("--seed", type=int, help="master seed (replaces the config's seed list)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, help="worker processes")
        if data:
            p.add_argument("--data", help="dataset JSONL written by `tbps gen`")
        return p

    common(sub.add_parser("gen", help="generate a synthetic dataset")).set_defaults(fn=cmd_gen)
    p = common(sub.add_parser("train", help="run the toy trainer"), data=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(fn=cmd_train)
    p = common(sub.add_parser("eval", help="search and score one (beta, gallery) point"), data=True)
    p.add_argument("--beta", type=_float_list)
    p.add_argument("--gallery", type=_int_list)
    p.add_argument("--predictions", help="score an existing prediction JSONL instead")
    p.set_defaults(fn=cmd_eval)
    for name, fn, help_ in (("sweep-beta", cmd_sweep_beta, "fusion-weight sweep"),
                            ("sweep-gallery", cmd_sweep_gallery, "gallery-size sweep"),
                            ("ablate", cmd_ablate, "component ablation")):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--beta", type=_float_list)
        p.add_argument("--gallery", type=_int_list)
        p.add_argument("--steps", type=int)
        p.set_defaults(fn=fn)
    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)
    p = sub.add_parser("selftest", help="quick end-to-end smoke test")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                args._config_keys = set(json.load(fh))
        except (OSError, json.JSONDecodeError, TypeError):
            args._config_keys = set()  # load_config reports the problem
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report, never traceback, at the CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
