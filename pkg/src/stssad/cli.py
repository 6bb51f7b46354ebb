"""Command-line interface: ``stssad {synth,tune,eval,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import augment, datagen, detector, evaluation, experiments, gradcheck, tuner
from .datagen import DatasetError, SynthSpec
from .experiments import ExperimentError
from .tuner import TunerError

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
N_DUMPS = 4


class ConfigError(ValueError):
    pass


class RuntimeFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stssad", description="Self-tuning augmentation for self-supervised anomaly detection.")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config's seeds)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes (default: CPU count)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic testbed on disk")
    s.add_argument("spec", type=Path, help="JSON synth spec")

    t = sub.add_parser("tune", help="run the tuner for every task, method and seed in a config")
    t.add_argument("config", type=Path, help="JSON experiment config")
    t.add_argument("--dry-run", action="store_true", help="echo the resolved config and exit")
    t.add_argument("--mode", choices=sorted(experiments.MODE_ALIASES), help="override the method list")

    e = sub.add_parser("eval", help="score completed runs and write comparison reports")
    e.add_argument("runs", type=Path, help="directory written by 'tune'")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--suite", action="append", choices=sorted(gradcheck.SUITES), help="run only this suite")
    return p


# ---------------------------------------------------------------------------
# config files

def read_json(path: Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config version {data.get('version')!r} (expected {CONFIG_VERSION})")
    return data


def synth_spec_from(d: dict, seed: int | None = None) -> SynthSpec:
    d = {k: v for k, v in d.items() if k != "version"}
    if seed is not None:
        d["seed"] = seed
    try:
        return SynthSpec.from_dict(d)
    except (DatasetError, TypeError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    spec = synth_spec_from(read_json(args.spec), args.seed)
    out = args.out or Path("data") / spec.task_name
    if spec.n_test_anomaly == 0:
        print("warning: n_test_anomaly = 0, AUC will be undefined for this dataset", file=sys.stderr)
    ds = datagen.build_testbed(spec)
    try:
        datagen.save_dataset(ds, out)
    except OSError as exc:
        raise ConfigError(f"cannot write {out}: {exc}") from None
    print(f"wrote {out}: task {spec.task_name}, m={spec.m}, c={spec.channels}, seed={spec.seed}, "
          f"{len(ds.train)} train / {len(ds.test)} test images, true a* = {ds.meta['true_params']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# tune

def _dataset_sources(cfg: dict) -> list[dict]:
    if "datasets" in cfg and "dataset" in cfg:
        raise ConfigError("give either 'dataset' or 'datasets', not both")
    sources = cfg.get("datasets") or ([cfg["dataset"]] if "dataset" in cfg else None)
    if not sources:
        raise ConfigError("config needs a 'dataset' (or 'datasets') entry")
    for src in sources:
        if not isinstance(src, dict) or len(set(src) & {"synth", "path"}) != 1:
            raise ConfigError(f"dataset source must have exactly one of 'synth' or 'path': {src}")
    return sources


def resolve_experiment(cfg: dict, seed: int | None, mode: str | None) -> list[dict]:
    """Expand a config into cell descriptions ``{task, method, seed, source, family, tuner}``."""
    unknown = set(cfg) - {"version", "dataset", "datasets", "methods", "tuner", "seeds"}
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    seeds = [seed] if seed is not None else cfg.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    overrides = cfg.get("tuner", {})
    methods = cfg.get("methods", ["st_ssad"])
    cells = []
    for src in _dataset_sources(cfg):
        for s in seeds:
            if "synth" in src:
                spec = synth_spec_from(src["synth"], s)
                family, task = experiments.family_of(spec), spec.task_name
                source = {"synth": spec.to_dict()}
            else:
                path = Path(src["path"])
                try:
                    meta = json.loads((path / "meta.json").read_text())
                except (OSError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"cannot read dataset at {path}: {exc}") from None
                family, task = experiments.family_of(meta), meta.get("name", path.name)
                source = {"path": str(path.resolve())}
            names = methods
            if mode is not None:
                alias = experiments.MODE_ALIASES[mode]
                names = [f"{alias}_{family}" if alias in ("rs", "rd") else alias]
            for name in names:
                try:
                    config = experiments.method_config(name, family, s, overrides)
                except (ExperimentError, TunerError, TypeError) as exc:
                    raise ConfigError(f"method {name}: {exc}") from None
                cells.append({"task": task, "method": name, "seed": s, "source": source,
                              "family": family, "tuner": config.to_dict()})
    return cells


def estimate_iterations(cell: dict) -> int:
    t = cell["tuner"]
    n_init = len(t["init_list"]) if t.get("init_list") else 1
    return n_init * (t["warm_epochs"] + t["T"] * t["theta_updates_per_iter"])


def _load_source(source: dict):
    if "synth" in source:
        return datagen.build_testbed(SynthSpec.from_dict(source["synth"]))
    return datagen.load_dataset(source["path"])


def run_cell(cell: dict) -> dict:
    """Tune one cell and return its artifacts in memory (written by the caller)."""
    ds = _load_source(cell["source"])
    config = tuner.TunerConfig.from_dict(cell["tuner"])
    artifacts = {"cell": cell, "error": None}
    try:
        best, runs = tuner.tune(config, ds.unlabeled())
    except (TunerError, detector.DetectorError, FloatingPointError, ValueError) as exc:
        artifacts["error"] = f"{type(exc).__name__}: {exc}"
        return artifacts
    if best.params is None:
        artifacts["error"] = "every run aborted before producing a detector"
        return artifacts
    artifacts["runs"] = [{
        "index": r.index, "init": r.init.to_dict(), "final": r.final_a.to_dict(),
        "iterations": len(r.trajectory), "score_variance": r.score_var, "aborted": r.aborted,
        "selected": r.selected, "trajectory_csv": r.trajectory_csv(),
    } for r in runs]
    artifacts["selected"] = best.index
    artifacts["learned"] = best.final_a.to_dict()
    artifacts["params"] = best.params.arrays()
    artifacts["dumps"] = _augmentation_dumps(ds.train[:N_DUMPS], best.init, best.final_a, cell["seed"])
    aborted = [r for r in runs if r.aborted]
    if aborted:
        artifacts["error"] = "; ".join(f"run {r.index} aborted at {r.aborted}" for r in aborted)
    if "synth" in cell["source"]:
        artifacts["dataset"] = ds
    return artifacts


def _augmentation_dumps(x: np.ndarray, before: augment.AugParams, after: augment.AugParams, seed: int):
    rng = np.random.default_rng([seed, 0xD0])
    mu = augment.sample_centers(rng, len(x)) if after.kind == "cutdiff" else None
    out = [augment.apply(p, x, np.random.default_rng([seed, 0xD1]), mu=mu).data for p in (before, after)]
    return {"input": np.asarray(x), "before": out[0], "after": out[1]}


def cell_dir(root: Path, cell: dict) -> Path:
    return root / cell["task"] / cell["method"] / f"seed{cell['seed']}"


def write_cell(root: Path, artifacts: dict) -> Path:
    """Single writer for one cell's directory."""
    cell = artifacts["cell"]
    d = cell_dir(root, cell)
    d.mkdir(parents=True, exist_ok=True)
    marker = d / "ABORTED"
    if marker.exists():
        marker.unlink()
    source = dict(cell["source"])
    if "dataset" in artifacts:
        data_dir = root / cell["task"] / "data" / f"seed{cell['seed']}"
        if not (data_dir / "meta.json").exists():
            datagen.save_dataset(artifacts["dataset"], data_dir)
        source = {"path": os.path.relpath(data_dir, d), "synth": cell["source"]["synth"]}
    record = {"version": CONFIG_VERSION, "task": cell["task"], "method": cell["method"], "seed": cell["seed"],
              "family": cell["family"], "dataset": source, "tuner": cell["tuner"]}
    if "runs" in artifacts:
        for r in artifacts["runs"]:
            (d / f"run{r['index']}_trajectory.csv").write_text(r["trajectory_csv"])
        record["runs"] = [{k: v for k, v in r.items() if k != "trajectory_csv"} for r in artifacts["runs"]]
        record["selected"] = artifacts["selected"]
        record["learned"] = artifacts["learned"]
        _write_json(d / "selected.json", artifacts["learned"])
        detector.save_checkpoint(d / "params.ckpt", detector.EncoderParams(
            [detector.Tensor(a) for a in artifacts["params"]]))
        for k in range(len(artifacts["dumps"]["input"])):
            for name in ("input", "before", "after"):
                datagen.save_png(d / f"sample{k}_{name}.png", artifacts["dumps"][name][k])
    _write_json(d / "run.json", record)
    if artifacts["error"]:
        marker.write_text(artifacts["error"] + "\n")
    return d


def cmd_tune(args) -> int:
    cells = resolve_experiment(read_json(args.config), args.seed, args.mode)
    out = args.out or Path("runs")
    if args.dry_run:
        print(json.dumps({"output": str(out), "cells": cells}, indent=2, sort_keys=True, default=_json_default))
        total = sum(estimate_iterations(c) for c in cells)
        print(f"{len(cells)} cells, about {total} detector training steps in total")
        return EXIT_OK
    workers = max(1, int(args.workers))
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]
    failed = []
    for art in results:
        d = write_cell(out, art)
        status = "ABORTED" if art["error"] else "ok"
        learned = art.get("learned")
        print(f"{status:7s} {d.relative_to(out)}" + (f"  learned {learned}" if learned else ""))
        if art["error"]:
            failed.append(f"{d}: {art['error']}")
    if failed:
        raise RuntimeFailure("tuning failed:\n  " + "\n  ".join(failed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _discover(runs: Path) -> list[Path]:
    return sorted(p.parent for p in runs.glob("*/*/seed*/run.json"))


def cmd_eval(args) -> int:
    runs = args.runs
    if not runs.is_dir():
        raise ConfigError(f"{runs}: not a directory")
    cells = _discover(runs)
    if not cells:
        raise RuntimeFailure(f"{runs}: no completed runs found")
    rows, skipped = [], []
    for d in cells:
        record = json.loads((d / "run.json").read_text())
        if (d / "ABORTED").exists() or not (d / "params.ckpt").exists():
            skipped.append(str(d.relative_to(runs)))
            continue
        ds = datagen.load_dataset((d / record["dataset"]["path"]).resolve())
        params = detector.load_checkpoint(d / "params.ckpt")
        auc = evaluation.auc(evaluation.scored_test_set(params, ds))
        rows.append(evaluation.ResultRow(record["task"], record["method"], int(record["seed"]), auc))
    if skipped:
        print("skipping aborted cells: " + ", ".join(skipped), file=sys.stderr)
    try:
        table = evaluation.write_reports(rows, args.out or runs)
    except evaluation.EvaluationError as exc:
        raise RuntimeFailure(str(exc)) from None
    print(evaluation.render_markdown(table), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_suites(args.suite)
    for r in reports:
        print(r.summary())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_RUNTIME


COMMANDS = {"synth": cmd_synth, "tune": cmd_tune, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"stssad: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, DatasetError, OSError) as exc:
        print(f"stssad: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
