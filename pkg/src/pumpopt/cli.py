"""Command-line workflow: validate, generate, train, optimize, verify.

Every command writes its results plus a ``run_manifest.json`` into ``--out``.
Output files contain no timestamps or timings, so re-running a command with
the same inputs and seed reproduces them byte for byte. Timing goes to stderr.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import fitness as ft
from . import metamodel as mm
from . import optimizer as opt
from . import simulator
from .network import (MODES, ConfigError, NetworkModel, Schedule, check_schedule, initial_levels,
                      load_model, validate_model)

log = logging.getLogger("pumpopt")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2
MANIFEST = "run_manifest.json"
DEFAULT_META_MARGIN = 0.005


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors here share code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir: Path, command: str, args: dict, seed: Optional[int],
                   inputs: dict[str, Path], outputs: list[Path]) -> Path:
    manifest = {
        "tool": "pumpopt",
        "version": __version__,
        "command": command,
        "arguments": args,
        "seed": seed,
        "inputs": {role: {"path": str(p), "sha256": sha256_file(p)} for role, p in sorted(inputs.items())},
        "outputs": {p.name: sha256_file(p) for p in sorted(outputs)},
    }
    path = out_dir / MANIFEST
    _dump_json(path, manifest)
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_schedule(model: NetworkModel, schedule: Schedule, path) -> None:
    """Rows are control elements, columns are intervals.

    Status and setting rows come first; initial levels of the free tanks
    follow as normalized values in column 0 of an ``initial_level`` block.
    """
    m = model.m
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["element", "block"] + [str(k) for k in range(m)])
        for eid, row in zip(model.status_ids, schedule.statuses):
            w.writerow([eid, "status"] + [repr(float(v)) for v in row])
        for eid, row in zip(model.setting_ids, schedule.settings):
            w.writerow([eid, "setting"] + [repr(float(v)) for v in row])
        for j, lvl in zip(model.free_tanks, schedule.initial_levels):
            w.writerow([model.tank_ids[j], "initial_level", repr(float(lvl))] + [""] * (m - 1))


def read_schedule(model: NetworkModel, path) -> tuple[NetworkModel, Schedule]:
    """Load a schedule CSV.

    Tanks listed in the ``initial_level`` block are treated as free, the rest
    keep their fixed start. Returns the model variant matching the file.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    m = model.m
    if not rows or rows[0][:2] != ["element", "block"] or len(rows[0]) != m + 2:
        raise ConfigError(f"{path}: header must be element,block,0..{m - 1}")
    status, setting, levels = {}, {}, {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != m + 2:
            raise ConfigError(f"{path}: line {lineno}: expected {m + 2} fields, got {len(row)}")
        eid, block, vals = row[0], row[1], row[2:]
        try:
            if block == "initial_level":
                levels[eid] = float(vals[0])
            elif block in ("status", "setting"):
                (status if block == "status" else setting)[eid] = [float(v) for v in vals]
            else:
                raise ConfigError(f"{path}: line {lineno}: unknown block {block!r}")
        except ValueError as exc:
            raise ConfigError(f"{path}: line {lineno}: {exc}") from exc
    for ids, found, what in ((model.status_ids, status, "status"), (model.setting_ids, setting, "setting")):
        if set(found) != set(ids):
            raise ConfigError(f"{path}: {what} rows {sorted(found)} do not match model elements {sorted(ids)}")
    unknown = set(levels) - set(model.tank_ids)
    if unknown:
        raise ConfigError(f"{path}: unknown tanks {sorted(unknown)}")
    tanks = tuple(dataclasses.replace(t, initial_level_fixed=None) if t.id in levels else t
                  for t in model.tanks)
    variant = dataclasses.replace(model, tanks=tanks)
    missing = [t.id for t in variant.tanks if t.initial_level_fixed is None and t.id not in levels]
    if missing:
        raise ConfigError(f"{path}: no initial level for tanks {missing}")
    sched = Schedule(np.array([status[i] for i in model.status_ids]).reshape(len(model.status_ids), m),
                     np.array([setting[i] for i in model.setting_ids]).reshape(len(model.setting_ids), m),
                     np.array([levels[variant.tank_ids[j]] for j in variant.free_tanks]))
    check_schedule(variant, sched)
    return variant, sched


def _write_levels(model: NetworkModel, traj, path) -> None:
    """Normalized tank levels per interval boundary plus normalized energy rate."""
    lev = model.normalize_levels(traj.levels)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval"] + model.tank_ids + ["energy"])
        for k in range(model.m + 1):
            e = repr(float(traj.energy_rate[k] / model.e_max)) if k < model.m else ""
            w.writerow([k] + [repr(float(v)) for v in lev[k]] + [e])


def _read_levels(model: NetworkModel, path) -> np.ndarray:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["interval"] + model.tank_ids + ["energy"] or len(rows) != model.m + 2:
        raise ConfigError(f"{path}: not a predicted-levels file for this model")
    return np.array([[float(v) for v in r[1:1 + len(model.tanks)]] for r in rows[1:]])


def _constraints(model: NetworkModel, path) -> ft.ConstraintSet:
    return ft.load_constraints(model, path) if path else ft.ConstraintSet.from_model(model)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    model = load_model(args.model)
    problems = validate_model(model)
    for p in problems:
        print(f"{args.model}: {p}", file=sys.stderr)
    if problems:
        return EXIT_INPUT
    print(f"{args.model}: valid ({len(model.tanks)} tanks, {len(model.pumps)} pumps, "
          f"{len(model.valves)} valves, m={model.m})")
    return EXIT_OK


def _load_valid(path) -> NetworkModel:
    model = load_model(path)
    problems = validate_model(model)
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return model


def cmd_generate(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    model = _load_valid(args.model)
    out = _out_dir(args.out)
    ds = simulator.generate_dataset(model, args.samples, args.seed)
    paths = simulator.write_dataset(ds, out)
    write_manifest(out, "generate", {"samples": args.samples}, args.seed, {"model": Path(args.model)}, paths)
    print(f"wrote {len(paths)} files with {len(ds)} rows each to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model = _load_valid(args.model)
    data_dir = Path(args.data)
    ds = simulator.read_dataset(model, data_dir)
    config = mm.TrainConfig(hidden=args.hidden, learning_rate=args.learning_rate, epochs=args.epochs,
                            batch_size=args.batch_size, validation_fraction=args.validation_fraction,
                            top_k=args.top_k, seed=args.seed)
    out = _out_dir(args.out)
    meta = mm.build_metamodel(model, ds, config)
    meta_path = out / "metamodel.json"
    meta.save(meta_path)
    report_path = out / "training_report.csv"
    with report_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "inputs", "validation_rmse"])
        for target, net in meta.sub_anns.items():
            w.writerow([target, " ".join(net.input_ids), repr(meta.training_report[target])])
    inputs = {"model": Path(args.model)}
    inputs.update({f"data:{p.name}": p for p in sorted(data_dir.glob("*.csv"))})
    write_manifest(out, "train", {k: getattr(config, k) for k in config.__dataclass_fields__},
                   args.seed, inputs, [meta_path, report_path])
    for target, score in meta.training_report.items():
        print(f"{target}: validation RMSE {score:.6f}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    base = _load_valid(args.model)
    model = base.for_mode(args.mode)
    config = opt.GaConfig.load(args.ga_config) if args.ga_config else opt.GaConfig()
    if args.seed is not None:
        config = opt.GaConfig.from_dict({**config.__dict__, "seed": args.seed})
    constraints = _constraints(model, args.constraints)
    inputs = {"model": Path(args.model)}
    if args.constraints:
        inputs["constraints"] = Path(args.constraints)
    if args.ga_config:
        inputs["ga_config"] = Path(args.ga_config)
    if args.meta:
        meta = mm.MetaModel.load(args.meta)
        backend = ft.MetaModelBackend(model, meta)
        inputs["meta"] = Path(args.meta)
        margin = DEFAULT_META_MARGIN if args.margin is None else args.margin
    else:
        backend = ft.SimulatorBackend(model, args.step_minutes)
        margin = 0.0 if args.margin is None else args.margin
    search = constraints.tightened(margin) if margin > 0 else constraints
    fitness_fn = ft.fitness_function(model, backend, search, config.penalty_factor)

    def progress(g, ranked):
        if g % 100 == 0:
            log.info("generation %d: best F* %.6f", g, ranked[0].fitness.penalized)

    result = opt.run_ga(model, fitness_fn, config, callback=progress)
    best = result.best.schedule
    out = _out_dir(args.out)
    sched_path = out / "schedule.csv"
    write_schedule(model, best, sched_path)
    # the emitted report scores the best schedule against the nominal constraints
    report = ft.fitness_function(model, backend, constraints, config.penalty_factor)([best])[0]
    traj = ft.trajectory_from_backend(model, backend, best)
    report_path = out / "fitness_report.json"
    _dump_json(report_path, {
        "mode": args.mode,
        "backend": "metamodel" if args.meta else "simulator",
        "constraint_margin": margin,
        "chromosome_length": model.chromosome_length,
        "initial_levels": dict(zip(model.tank_ids, [float(v) for v in initial_levels(model, best)])),
        "ga_config": config.__dict__,
        "manifest": MANIFEST,
        **report.to_dict(),
    })
    conv_path = out / "convergence.csv"
    opt.write_history(result.history, conv_path)
    pred_path = out / "predicted_levels.csv"
    _write_levels(model, traj, pred_path)
    write_manifest(out, "optimize", {"mode": args.mode, "margin": margin, "step_minutes": args.step_minutes},
                   config.seed, inputs, [sched_path, report_path, conv_path, pred_path])
    print(f"F = {report.objective:.4f}  G = {report.violation:.4f}  F* = {report.penalized:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    base = _load_valid(args.model)
    model, schedule = read_schedule(base, args.schedule)
    constraints = _constraints(model, args.constraints)
    traj = simulator.simulate_eps(model, schedule, args.step_minutes)
    penalty = opt.GaConfig.load(args.ga_config).penalty_factor if args.ga_config else opt.GaConfig().penalty_factor
    report = ft.evaluate(traj, model, constraints, penalty)
    sim = model.normalize_levels(traj.levels)

    inputs = {"model": Path(args.model), "schedule": Path(args.schedule)}
    pred_path = Path(args.predicted) if args.predicted else Path(args.schedule).with_name("predicted_levels.csv")
    pred = None
    if pred_path.exists():
        pred = _read_levels(model, pred_path)
        inputs["predicted"] = pred_path
    elif args.predicted:
        raise ConfigError(f"{pred_path}: not found")

    out = _out_dir(args.out)
    table_path = out / "verification.csv"
    with table_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "tank", "predicted", "simulated", "discrepancy"])
        for k in range(model.m + 1):
            for j, tank in enumerate(model.tank_ids):
                p = "" if pred is None else repr(float(pred[k, j]))
                d = "" if pred is None else repr(float(abs(pred[k, j] - sim[k, j])))
                w.writerow([k, tank, p, repr(float(sim[k, j])), d])

    limits = dict(zip(constraints.switch_ids, constraints.switch_limits))
    switches = {pid: {"count": n, "limit": None if np.isnan(limits[pid]) else int(limits[pid]),
                      "exceeded": bool(not np.isnan(limits[pid]) and n > limits[pid])}
                for pid, n in report.switches.items()}
    tol = dict(zip(constraints.variables, constraints.periodicity))
    deltas = {t: {"delta": float(sim[-1, j] - sim[0, j]),
                  "tolerance": None if np.isnan(tol[t]) else float(tol[t]),
                  "within": bool(np.isnan(tol[t]) or abs(sim[-1, j] - sim[0, j]) <= tol[t])}
              for j, t in enumerate(model.tank_ids)}
    summary = {
        "step_minutes": args.step_minutes,
        "objective": report.objective,
        "violation": report.violation,
        "penalized": report.penalized,
        "feasible": report.feasible,
        "per_constraint": report.per_constraint,
        "end_deltas": deltas,
        "switches": switches,
        "clamped_intervals": int(np.count_nonzero(traj.clamped)) if traj.clamped is not None else 0,
        "max_discrepancy": None if pred is None else float(np.abs(pred - sim).max()),
        "manifest": MANIFEST,
    }
    summary_path = out / "verification_summary.json"
    _dump_json(summary_path, summary)
    write_manifest(out, "verify", {"step_minutes": args.step_minutes}, None, inputs, [table_path, summary_path])
    print(f"ground truth: F = {report.objective:.4f}  G = {report.violation:.4f}"
          + ("" if pred is None else f"  max discrepancy {summary['max_discrepancy']:.4f}"))
    for pid, s in switches.items():
        if s["exceeded"]:
            print(f"warning: {pid} switches {s['count']} times, limit {s['limit']}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pumpopt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pumpopt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--model", required=True, help="network model JSON")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("validate", help="check a network model file")
    common(p, out=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("generate", help="simulate random schedules into training CSVs")
    common(p)
    p.add_argument("--samples", type=int, required=True, help="number of random 24-step schedules")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    d = mm.TrainConfig()
    p = sub.add_parser("train", help="fit the meta-model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="directory written by 'generate'")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--validation-fraction", type=float, default=d.validation_fraction)
    p.add_argument("--top-k", type=int, default=d.top_k)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("optimize", help="search for the cheapest feasible schedule")
    common(p)
    p.add_argument("--meta", help="trained meta-model; without it the simulator scores schedules")
    p.add_argument("--mode", choices=MODES, default="schedule_and_storage")
    p.add_argument("--ga-config", help="GA parameter JSON")
    p.add_argument("--constraints", help="constraint JSON; defaults to the limits in the model")
    p.add_argument("--seed", type=int, help="overrides the seed in the GA config")
    p.add_argument("--margin", type=float,
                   help=f"tighten bounds and periodicity tolerances by this much during the search "
                        f"(default {DEFAULT_META_MARGIN} with --meta, 0 otherwise)")
    p.add_argument("--step-minutes", type=float, help="simulator sub-step when no meta-model is given")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("verify", help="replay a schedule through the simulator")
    common(p)
    p.add_argument("--schedule", required=True, help="schedule CSV written by 'optimize'")
    p.add_argument("--predicted", help="predicted levels CSV (default: next to the schedule)")
    p.add_argument("--constraints", help="constraint JSON; defaults to the limits in the model")
    p.add_argument("--ga-config", help="GA parameter JSON, read for its penalty factor")
    p.add_argument("--step-minutes", type=float, help="simulation sub-step in minutes")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"pumpopt {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"pumpopt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (mm.TrainingError, opt.GAError, OSError) as exc:
        print(f"pumpopt {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
