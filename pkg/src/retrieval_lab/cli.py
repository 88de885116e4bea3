"""Experiment runner: ``retrieval-lab run|ablate|sweep|eval-csv``.

An experiment spec is one YAML or JSON file::

    dataset:
      synthetic: {seed: 0}          # generate_synthetic kwargs, or
      # csv: features.csv           # label,f0,... rows (load_feature_csv)
    schedule: {original_count: 8, group_sizes: [8], train_fraction: 0.6}
    train: {epochs: 200, alpha: 1.0, beta: 1.0}
    arms: [ours, finetune, lwf]
    seeds: [0]
    sweep: {alpha: [0.1, 1], beta: [0.1, 1, 10], ablation: true}
    output_dir: out

Every arm x cell x seed runs from the same stage-A net of its seed and is
written to ``report-{arm}-{cell}.json``. Curves go to ``pr-{arm}.csv`` and
``trace-{arm}.csv``; ``summary.csv`` has one row per arm, cell, group and K.

Exit codes: 0 ok, 1 runtime failure, 2 invalid spec or arguments.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import losses as L
from .datagen import (DEFAULT_SYNTHETIC, ClassSplitDataset, ParseError, generate_synthetic,
                      load_feature_csv, split_schedule)
from .diffcore import ContractError
from .retrieval import DEFAULT_KS, evaluate
from .trainer import (METHODS, StageA, TrainConfig, make_report, prepare_stage_a, run_multi_step,
                      run_one_step, stage_a_report, train_joint_reference)

log = logging.getLogger("retrieval_lab")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

ABLATION_CELLS = {
    "ce+trip": (False, False),
    "+dist": (True, False),
    "+mmd": (False, True),
    "+dist+mmd": (True, True),
}
_WEIGHT_KEYS = ("alpha", "beta", "margin", "temperature")
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"method", "weights", "kernel", "seed"}
_TOP_KEYS = {"dataset", "schedule", "train", "arms", "seeds", "seed", "sweep", "output_dir", "protocol"}


class SpecError(ValueError):
    """Invalid experiment spec; the message names the offending field."""


class RunError(RuntimeError):
    def __init__(self, arm: str, cell: str, seed: int, cause: BaseException):
        super().__init__(f"arm {arm!r} (cell {cell}, seed {seed}) failed: {type(cause).__name__}: {cause}")
        self.arm = arm


# ------------------------------------------------------------------- spec
@dataclass
class ExperimentSpec:
    dataset: Dict[str, Any]
    original_count: int
    group_sizes: List[int]
    train_fraction: float
    protocol: str
    train: TrainConfig
    arms: List[str]
    seeds: List[int]
    alpha_grid: List[float] = field(default_factory=list)
    beta_grid: List[float] = field(default_factory=list)
    ablation: bool = False
    output_dir: Path = Path("out")


def _need(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise SpecError(f"{path}: {msg}")


def _number_list(value, path: str, positive: bool = False) -> List[float]:
    _need(isinstance(value, list) and len(value) > 0, path, "must be a non-empty list")
    out = []
    for i, v in enumerate(value):
        _need(isinstance(v, (int, float)) and not isinstance(v, bool), f"{path}[{i}]", "must be a number")
        _need(v >= 0 and (v > 0 or not positive), f"{path}[{i}]", "must be non-negative")
        out.append(float(v))
    return out


def load_spec_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"{path}: cannot read spec ({exc.strerror})") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise SpecError(f"{path}: not valid {'JSON' if path.suffix == '.json' else 'YAML'}: {exc}") from None
    _need(isinstance(data, dict), str(path), "top level must be a mapping")
    return data


def _train_config(block: dict) -> TrainConfig:
    _need(isinstance(block, dict), "train", "must be a mapping")
    weights, kernel, cfg = {}, {}, {}
    for key, v in block.items():
        path = f"train.{key}"
        if key in _WEIGHT_KEYS:
            weights[key] = v
        elif key == "kernel":
            _need(isinstance(v, dict), path, "must be a mapping")
            unknown = set(v) - {"selection", "multipliers", "bandwidths"}
            _need(not unknown, path, f"unknown keys {sorted(unknown)}")
            kernel = {k: tuple(x) if isinstance(x, list) else x for k, x in v.items()}
        elif key in _TRAIN_KEYS:
            cfg[key] = tuple(v) if isinstance(v, list) else v
        else:
            raise SpecError(f"{path}: unknown training field")
    try:
        return TrainConfig(weights=L.LossWeights(**weights), kernel=L.KernelSpec(**kernel), **cfg)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"train: {exc}") from None


def parse_spec(data: dict, base_dir: Path = Path(".")) -> ExperimentSpec:
    unknown = set(data) - _TOP_KEYS
    _need(not unknown, "spec", f"unknown top-level keys {sorted(unknown)}")

    ds = data.get("dataset", {"synthetic": {}})
    _need(isinstance(ds, dict) and len(ds) == 1 and next(iter(ds)) in ("synthetic", "csv"),
          "dataset", "must hold exactly one of 'synthetic' or 'csv'")
    if "synthetic" in ds:
        syn = ds["synthetic"] or {}
        _need(isinstance(syn, dict), "dataset.synthetic", "must be a mapping")
        bad = set(syn) - set(DEFAULT_SYNTHETIC) - {"seed"}
        _need(not bad, "dataset.synthetic", f"unknown keys {sorted(bad)}")
        dataset = {"synthetic": dict(syn)}
    else:
        _need(isinstance(ds["csv"], str), "dataset.csv", "must be a file path")
        dataset = {"csv": str((base_dir / ds["csv"]).resolve())}

    sched = data.get("schedule")
    _need(isinstance(sched, dict), "schedule", "is required (original_count, group_sizes)")
    oc = sched.get("original_count")
    _need(isinstance(oc, int) and oc >= 1, "schedule.original_count", "must be an integer >= 1")
    gs = sched.get("group_sizes")
    _need(isinstance(gs, list) and len(gs) > 0 and all(isinstance(g, int) and g >= 1 for g in gs),
          "schedule.group_sizes", "must be a non-empty list of integers >= 1")
    tf = sched.get("train_fraction", 0.6)
    _need(isinstance(tf, (int, float)) and 0 < tf < 1, "schedule.train_fraction", "must lie in (0, 1)")
    bad = set(sched) - {"original_count", "group_sizes", "train_fraction"}
    _need(not bad, "schedule", f"unknown keys {sorted(bad)}")

    protocol = data.get("protocol", "multi_step" if len(gs) > 1 else "one_step")
    _need(protocol in ("one_step", "multi_step"), "protocol", "must be 'one_step' or 'multi_step'")
    _need(protocol == "one_step" or len(gs) >= 2, "protocol",
          "multi_step needs at least two groups in schedule.group_sizes")

    train = _train_config(data.get("train", {}))

    arms = data.get("arms")
    _need(isinstance(arms, list) and len(arms) > 0, "arms", "must list at least one arm")
    for i, a in enumerate(arms):
        _need(a in METHODS, f"arms[{i}]", f"unknown arm {a!r}; expected one of {list(METHODS)}")
    _need(len(set(arms)) == len(arms), "arms", "contains duplicates")

    if "seeds" in data:
        seeds = data["seeds"]
        _need(isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds),
              "seeds", "must be a non-empty list of non-negative integers")
    else:
        seed = data.get("seed", 0)
        _need(isinstance(seed, int) and seed >= 0, "seed", "must be a non-negative integer")
        seeds = [seed]

    spec = ExperimentSpec(dataset, oc, list(gs), float(tf), protocol, train, list(arms), list(seeds),
                          output_dir=base_dir / str(data.get("output_dir", "out")))
    if "sweep" in data:
        sw = data["sweep"]
        _need(isinstance(sw, dict) and sw, "sweep", "must be a non-empty mapping")
        bad = set(sw) - {"alpha", "beta", "ablation"}
        _need(not bad, "sweep", f"unknown keys {sorted(bad)}")
        _need(("alpha" in sw) == ("beta" in sw), "sweep", "alpha and beta grids go together")
        if "alpha" in sw:
            spec.alpha_grid = _number_list(sw["alpha"], "sweep.alpha")
            spec.beta_grid = _number_list(sw["beta"], "sweep.beta")
        spec.ablation = bool(sw.get("ablation", False))
    return spec


# ---------------------------------------------------------------- dataset
def build_dataset(spec: ExperimentSpec, seed: int) -> ClassSplitDataset:
    if "synthetic" in spec.dataset:
        kw = dict(spec.dataset["synthetic"])
        kw.setdefault("seed", seed)
        raw = generate_synthetic(**kw)
    else:
        raw = load_feature_csv(spec.dataset["csv"])
    return split_schedule(raw, spec.original_count, spec.group_sizes, spec.train_fraction, seed=seed)


# ------------------------------------------------------------------ cells
@dataclass(frozen=True)
class Cell:
    arm: str
    name: str
    seed: int
    config: TrainConfig


def _cell_name(base: str, seed: int, n_seeds: int) -> str:
    return base if n_seeds == 1 else f"{base}-s{seed}"


def arm_cells(spec: ExperimentSpec) -> List[Cell]:
    return [Cell(arm, _cell_name("default", s, len(spec.seeds)), s,
                 replace(spec.train, method=arm, seed=s))
            for arm in spec.arms for s in spec.seeds]


def ablation_cells(spec: ExperimentSpec) -> List[Cell]:
    out = []
    w = spec.train.weights
    for name, (dist, mmd) in ABLATION_CELLS.items():
        weights = replace(w, alpha=w.alpha if dist else 0.0, beta=w.beta if mmd else 0.0)
        for s in spec.seeds:
            cfg = replace(spec.train, method="ours", seed=s, weights=weights)
            out.append(Cell("ours", _cell_name(name, s, len(spec.seeds)), s, cfg))
    return out


def sweep_cells(spec: ExperimentSpec, alphas: Sequence[float], betas: Sequence[float]) -> List[Cell]:
    out = []
    for a in alphas:
        for b in betas:
            for s in spec.seeds:
                cfg = replace(spec.train, method="ours", seed=s,
                              weights=replace(spec.train.weights, alpha=a, beta=b))
                out.append(Cell("ours", _cell_name(f"a{a:g}-b{b:g}", s, len(spec.seeds)), s, cfg))
    return out


def _run_cell(spec: ExperimentSpec, cell: Cell, stage_a: Optional[StageA]) -> List[dict]:
    try:
        dataset = build_dataset(spec, cell.seed)
        cfg = cell.config
        if cfg.method == "joint_reference":
            res = train_joint_reference(dataset, cfg)
            groups = list(range(len(dataset.groups)))
            return [make_report(cell.arm, 1, res.net, dataset, groups, res, cfg, cell.name)]
        if spec.protocol == "one_step":
            return [run_one_step(dataset, cfg, stage_a=stage_a, cell=cell.name, arm=cell.arm)]
        reports = run_multi_step(dataset, cfg, stage_a=stage_a, cell=cell.name)
        for r in reports:
            r["cell"] = f"{cell.name}-step{r['step']}"
        return reports
    except (ContractError, ValueError, FloatingPointError, OSError) as exc:
        raise RunError(cell.arm, cell.name, cell.seed, exc) from exc


def _stage_a_job(spec: ExperimentSpec, seed: int) -> Tuple[StageA, dict]:
    cell = _cell_name("default", seed, len(spec.seeds))
    try:
        dataset = build_dataset(spec, seed)
        if spec.protocol == "one_step":
            new = [c for g in dataset.groups[1:] for c in g]
            dataset = replace(dataset, groups=[dataset.groups[0], new])
        cfg = replace(spec.train, seed=seed)
        sa = prepare_stage_a(dataset, cfg)
    except (ContractError, ValueError, FloatingPointError, OSError) as exc:
        raise RunError("initial", cell, seed, exc) from exc
    return sa, stage_a_report(dataset, sa, cfg, cell=cell)


def execute(spec: ExperimentSpec, cells: List[Cell], jobs: int = 1) -> Tuple[List[dict], List[dict]]:
    """Stage A once per seed, then every cell; returns (initial reports, cell reports)."""
    needs_a = any(c.config.method != "joint_reference" for c in cells)
    seeds = sorted({c.seed for c in cells})
    stage: Dict[int, StageA] = {}
    initial: List[dict] = []
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        if needs_a:
            log.info("stage A for seeds %s", seeds)
            if pool:
                results = list(pool.map(_stage_a_job, [spec] * len(seeds), seeds))
            else:
                results = [_stage_a_job(spec, s) for s in seeds]
            for s, (sa, rep) in zip(seeds, results):
                stage[s] = sa
                initial.append(rep)
        args = [stage.get(c.seed) for c in cells]
        log.info("running %d cells with %d job(s)", len(cells), jobs)
        if pool:
            nested = list(pool.map(_run_cell, [spec] * len(cells), cells, args))
        else:
            nested = [_run_cell(spec, c, a) for c, a in zip(cells, args)]
    finally:
        if pool:
            pool.shutdown()
    return initial, [r for group in nested for r in group]


# ---------------------------------------------------------------- outputs
def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _check_finite(obj, path="report"):
    if isinstance(obj, float) and not np.isfinite(obj):
        raise RunError("report", path, -1, ValueError(f"non-finite number at {path}"))
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")


def prepare_output_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise SpecError(f"output_dir: {path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def summary_rows(reports: List[dict]) -> List[List[str]]:
    rows = []
    for r in reports:
        for g, m in r["groups"].items():
            for k, v in m["recall"].items():
                rows.append((r["arm"], g, int(k), r["cell"], v, m["map"]))
    rows.sort(key=lambda t: (t[0], t[1], t[2], t[3]))
    return [[a, g, str(k), c, _fmt(v), _fmt(mp)] for a, g, k, c, v, mp in rows]


def write_outputs(out: Path, reports: List[dict]) -> None:
    for r in reports:
        _check_finite(r)
        (out / f"report-{r['arm']}-{r['cell']}.json").write_text(json.dumps(r, indent=1, sort_keys=True))
    by_arm: Dict[str, List[dict]] = {}
    for r in reports:
        by_arm.setdefault(r["arm"], []).append(r)
    for arm, rs in by_arm.items():
        with (out / f"pr-{arm}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", "group", "rank", "recall", "precision"])
            for r in rs:
                for g, m in r["groups"].items():
                    for i, (rec, prec) in enumerate(m.get("pr", []), start=1):
                        w.writerow([r["cell"], g, i, _fmt(rec), _fmt(prec)])
        with (out / f"trace-{arm}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            terms = ["total", "ce", "triplet", "dist", "mmd", "l2feat", "ewc"]
            w.writerow(["cell", "epoch", *terms, "seconds", "map"])
            for r in rs:
                maps = {int(e): v for e, v in r["map_trace"]}
                trace = r["loss_trace"]
                for e in range(len(r["epoch_seconds"])):
                    vals = [_fmt(trace[t][e]) if t in trace else "" for t in terms]
                    mp = _fmt(maps[e + 1]) if e + 1 in maps else ""
                    w.writerow([r["cell"], e + 1, *vals, _fmt(r["epoch_seconds"][e]), mp])
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "group", "K", "cell", "recall", "map"])
        w.writerows(summary_rows(reports))


def comparison_table(reports: List[dict], prefix_cells: Sequence[str]) -> List[List[str]]:
    """Seed-averaged old/new Recall@1 per cell name (seed suffix stripped)."""
    agg: Dict[str, Dict[str, List[float]]] = {}
    for r in reports:
        base = r["cell"].rsplit("-s", 1)[0] if r["cell"].rsplit("-s", 1)[-1].isdigit() else r["cell"]
        if base not in prefix_cells:
            continue
        for g, m in r["groups"].items():
            agg.setdefault(base, {}).setdefault(g, []).append(m["recall"]["1"])
    rows = []
    for name in prefix_cells:
        if name in agg:
            groups = agg[name]
            rows.append([name, *(f"{g}={_fmt(np.mean(v))}" for g, v in sorted(groups.items()))])
    return rows


def _write_table(path: Path, header: List[str], rows: List[List[str]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands
def _apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    if getattr(args, "seed", None) is not None:
        spec.seeds = [args.seed]
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 1:
            raise SpecError("--epochs: must be >= 1")
        spec.train = replace(spec.train, epochs=args.epochs)
    if getattr(args, "arm", None):
        for a in args.arm:
            if a not in METHODS:
                raise SpecError(f"--arm: unknown arm {a!r}")
        spec.arms = list(dict.fromkeys(args.arm))
    if getattr(args, "out", None):
        spec.output_dir = Path(args.out)
    return spec


def _load(args) -> ExperimentSpec:
    path = Path(args.spec)
    return _apply_overrides(parse_spec(load_spec_file(path), path.parent), args)


def _finish(spec: ExperimentSpec, initial: List[dict], reports: List[dict]) -> None:
    write_outputs(spec.output_dir, initial + reports)
    log.info("wrote %d reports to %s", len(initial) + len(reports), spec.output_dir)


def cmd_run(args) -> int:
    spec = _load(args)
    prepare_output_dir(spec.output_dir, args.force)
    cells = arm_cells(spec)
    if spec.ablation:
        cells += ablation_cells(spec)
    if spec.alpha_grid:
        cells += sweep_cells(spec, spec.alpha_grid, spec.beta_grid)
    initial, reports = execute(spec, cells, args.jobs)
    _finish(spec, initial, reports)
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = _load(args)
    prepare_output_dir(spec.output_dir, args.force)
    initial, reports = execute(spec, ablation_cells(spec), args.jobs)
    _finish(spec, initial, reports)
    _write_table(spec.output_dir / "ablation.csv", ["cell", "recall@1 by group"],
                 comparison_table(reports, list(ABLATION_CELLS)))
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = _load(args)
    alphas = args.alpha or spec.alpha_grid
    betas = args.beta or spec.beta_grid
    if not alphas or not betas:
        raise SpecError("sweep: give --alpha and --beta or a sweep block with both grids")
    _number_list(list(alphas), "--alpha")
    _number_list(list(betas), "--beta")
    prepare_output_dir(spec.output_dir, args.force)
    cells = sweep_cells(spec, alphas, betas)
    initial, reports = execute(spec, cells, args.jobs)
    _finish(spec, initial, reports)
    names = [f"a{a:g}-b{b:g}" for a in alphas for b in betas]
    _write_table(spec.output_dir / "sensitivity.csv", ["cell", "recall@1 by group"],
                 comparison_table(reports, names))
    return EXIT_OK


def cmd_eval_csv(args) -> int:
    try:
        data = load_feature_csv(args.embeddings)
    except OSError as exc:
        raise SpecError(f"{args.embeddings}: cannot read ({exc.strerror})") from None
    try:
        metrics = evaluate(data.x, data.y, tuple(args.k), with_pr=args.pr)
    except ContractError as exc:
        raise SpecError(f"{args.embeddings}: {exc}") from None
    text = json.dumps(metrics, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retrieval-lab", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("spec", help="experiment spec (YAML or JSON)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--seed", type=int, help="run this single seed instead of the spec's")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        sp.add_argument("--epochs", type=int, help="override train.epochs")

    r = sub.add_parser("run", help="run every arm (and the sweep block, if any)")
    common(r)
    r.add_argument("--arm", action="append", help="restrict to this arm (repeatable)")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="loss-component ablation from one stage-A net per seed")
    common(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="alpha x beta sensitivity grid")
    common(s)
    s.add_argument("--alpha", type=float, nargs="+", help="alpha grid")
    s.add_argument("--beta", type=float, nargs="+", help="beta grid")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval-csv", help="retrieval metrics for precomputed embeddings")
    e.add_argument("embeddings", help="CSV with a header and label,f0,... rows")
    e.add_argument("-k", type=int, nargs="+", default=list(DEFAULT_KS), help="Recall@K cutoffs")
    e.add_argument("--pr", action="store_true", help="include PR points")
    e.add_argument("--out", help="write JSON here instead of stdout")
    e.set_defaults(func=cmd_eval_csv)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error: --jobs: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (SpecError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
