"""Command-line front end: ``run``, ``table``, ``validate`` and ``gen-synth``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 run failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    TARGET_HZ, WINDOW_LEN, WINDOW_STEP, build_registry, default_class_signals, load_recordings,
    read_manifest, resample, synth_recordings, write_dataset,
)
from .errors import ConfigError, DataError, TaskVAEError
from .harness import (
    RunConfig, RunLogWriter, final_task_records, load_split, normalize_budget, read_runlog,
    run_scenario,
)
from .metrics import MetricsRecord, aggregate
from .scenarios import SCENARIO_REGISTRY, check_feasible, parse_scenario
from .strategies import STRATEGIES

log = logging.getLogger("taskvae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4
DATA_ROOT_ENV = "TASKVAE_DATA_ROOT"


# --------------------------------------------------------------------- sweeps


@dataclass
class SweepSpec:
    datasets: list[str] = field(default_factory=lambda: ["synthetic"])
    participants: list = field(default_factory=lambda: [None])
    scenarios: list[str] = field(default_factory=list)  # empty: registry defaults
    strategies: list[str] = field(default_factory=lambda: ["taskvae"])
    budgets: list[str] = field(default_factory=lambda: ["eq-vae"])
    seeds: list[int] = field(default_factory=lambda: [0])
    data_root: str | None = None
    run: dict = field(default_factory=dict)  # extra RunConfig fields

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _seed_list(value) -> list[int]:
    if isinstance(value, int):
        if value < 1:
            raise ConfigError("seed count must be >= 1")
        return list(range(value))
    return [int(s) for s in value]


def load_sweep(path) -> SweepSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(raw) - set(SweepSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    spec = SweepSpec(**raw)
    spec.seeds = _seed_list(spec.seeds)
    return spec


def expand_sweep(spec: SweepSpec) -> list[RunConfig]:
    """Cross product of the sweep; infeasible (dataset, scenario) pairs are skipped."""
    strategies = list(STRATEGIES) if "all" in spec.strategies else spec.strategies
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)} or 'all'")
    budgets = [normalize_budget(b) for b in spec.budgets]
    synth = spec.run.get("synthetic", {}) or {}
    cells = []
    for ds in spec.datasets:
        scenarios = spec.scenarios or SCENARIO_REGISTRY.get(ds.lower(), ["2-2-2"] if ds == "synthetic" else [])
        if not scenarios:
            raise ConfigError(f"no scenarios given and none registered for dataset {ds!r}")
        for sc in scenarios:
            parsed = parse_scenario(sc)
            try:
                n_classes = synth.get("n_classes", 6) if ds == "synthetic" else None
                check_feasible(ds, parsed, n_classes)
            except ConfigError as exc:
                log.warning("skipping %s on %s: %s", sc, ds, exc)
                continue
            for participant, strategy, budget, seed in itertools.product(
                spec.participants, strategies, budgets, spec.seeds
            ):
                cells.append(RunConfig.from_dict({
                    **spec.run,
                    "dataset": ds, "participant": participant, "scenario": str(parsed),
                    "strategy": strategy, "budget": budget, "seed": seed,
                    "data_root": spec.data_root,
                }))
    if not cells:
        raise ConfigError("the sweep expands to no runnable cells")
    return cells


def _run_cell(cfg: RunConfig):
    try:
        return run_scenario(cfg), None
    except TaskVAEError as exc:
        return [], f"{type(exc).__name__}: {exc}"


def _cell_key(cfg: RunConfig) -> dict:
    return {k: getattr(cfg, k) for k in ("dataset", "participant", "scenario", "strategy", "budget", "seed")}


def cmd_run(args) -> int:
    spec = load_sweep(args.config) if args.config else SweepSpec()
    if args.synthetic:
        spec.datasets = ["synthetic"]
    if args.dataset:
        spec.datasets = args.dataset
    if args.participant:
        spec.participants = args.participant
    if args.scenario:
        spec.scenarios = args.scenario
    if args.strategy:
        spec.strategies = args.strategy
    if args.budget:
        spec.budgets = args.budget
    if args.seed_list:
        spec.seeds = args.seed_list
    elif args.seeds is not None:
        spec.seeds = _seed_list(args.seeds)
    spec.data_root = args.data_root or spec.data_root or os.environ.get(DATA_ROOT_ENV)
    run = dict(spec.run)
    if args.epochs is not None:
        run["train"] = {**run.get("train", {}), "epochs": args.epochs}
    if args.n_per_class is not None:
        run["synthetic"] = {**run.get("synthetic", {}), "n_per_class": args.n_per_class}
    if args.p is not None:
        run["filter"] = {**run.get("filter", {}), "p": args.p}
    spec.run = run

    try:
        cells = expand_sweep(spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    for ds in {c.dataset for c in cells} - {"synthetic"}:
        if not spec.data_root:
            raise DataError(f"dataset {ds!r} needs --data-root or ${DATA_ROOT_ENV} (or use --synthetic)")
        read_manifest(Path(spec.data_root) / ds)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = [f"taskvae {__version__}", "sweep " + json.dumps(spec.to_dict(), sort_keys=True, default=str)]

    splits = out / "splits"
    splits.mkdir(exist_ok=True)
    for cfg in {(c.dataset, c.participant): c for c in cells}.values():
        load_split(cfg).write_descriptor(splits / f"{cfg.dataset}_{cfg.participant or 'all'}.json")

    failures, all_records = [], []
    jobs = max(1, min(args.jobs, os.cpu_count() or 1, len(cells)))
    with RunLogWriter(out / "runs.csv", provenance) as writer:
        if jobs == 1:
            results = map(_run_cell, cells)
            pool = None
        else:
            pool = ProcessPoolExecutor(max_workers=jobs)
            results = pool.map(_run_cell, cells)
        try:
            for cfg, (records, err) in zip(cells, results):
                if err is not None:
                    log.error("cell %s failed: %s", _cell_key(cfg), err)
                    failures.append({**_cell_key(cfg), "error": err})
                    if not args.keep_going:
                        break
                    continue
                writer.write(records)
                all_records.extend(records)
                log.info("done %s", _cell_key(cfg))
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)

    summary = {
        "version": __version__,
        "sweep": spec.to_dict(),
        "run_config": [c.to_dict() for c in cells],
        "groups": _aggregate_groups(all_records),
        "failures": failures,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    print(f"wrote {len(all_records)} rows to {out / 'runs.csv'}")
    if failures:
        print(f"{len(failures)} cell(s) failed", file=sys.stderr)
        return EXIT_OK if args.keep_going else EXIT_RUN
    return EXIT_OK


def _aggregate_groups(records: list[MetricsRecord]) -> list[dict]:
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.dataset, r.participant, r.scenario, r.strategy, r.budget), []).append(r)
    return [
        {
            "dataset": k[0], "participant": k[1], "scenario": k[2], "strategy": k[3], "budget": k[4],
            "runs": len({r.seed for r in rs}),
            "tasks": {str(t): v for t, v in aggregate(rs).items()},
        }
        for k, rs in sorted(groups.items())
    ]


# ---------------------------------------------------------------------- table


def _budget_order(b: str):
    return (0, int(b), "") if b.isdigit() else (1, 0, b)


def build_table(records: list[MetricsRecord], metric: str = "act", decimals: int = 2):
    """Rows (dataset, scenario) x columns (strategy, budget) of mean final-task
    ``metric``. Returns (columns, rows) where each row is
    ``(dataset, scenario, {column: mean}, best_columns)``."""
    finals = final_task_records(records)
    cells: dict[tuple, dict[tuple, list]] = {}
    for r in finals:
        val = getattr(r, metric)
        cells.setdefault((r.dataset, r.scenario), {}).setdefault((r.strategy, r.budget), [])
        if val is not None:
            cells[(r.dataset, r.scenario)][(r.strategy, r.budget)].append(val)
    order = {s: i for i, s in enumerate(STRATEGIES)}
    columns = sorted({c for row in cells.values() for c in row},
                     key=lambda c: (order.get(c[0], 99), c[0], _budget_order(c[1])))
    rows = []
    for key in sorted(cells):
        means = {c: float(np.mean(v)) for c, v in cells[key].items() if v}
        if not means:
            warnings.warn(f"no {metric} values for {key}; row omitted")
            continue
        shown = {c: round(m, decimals) for c, m in means.items()}
        top = max(shown.values())
        rows.append((key[0], key[1], means, [c for c in columns if shown.get(c) == top]))
    return columns, rows


def _col_name(c):
    return f"{c[0]}@{c[1]}"


def render_table_text(columns, rows, decimals: int = 2) -> str:
    head = ["dataset", "scenario"] + [_col_name(c) for c in columns]
    lines = [head]
    for ds, sc, means, best in rows:
        cells = []
        for c in columns:
            if c not in means:
                cells.append("-")
            else:
                cells.append(f"{means[c]:.{decimals}f}" + ("*" if c in best else ""))
        lines.append([ds, sc] + cells)
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in lines) + "\n"


def render_table_csv(columns, rows, decimals: int = 2) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["dataset", "scenario"] + [_col_name(c) for c in columns] + ["best"])
    for ds, sc, means, best in rows:
        w.writerow([ds, sc] + [f"{means[c]:.{decimals}f}" if c in means else "" for c in columns]
                   + [";".join(_col_name(c) for c in best)])
    return buf.getvalue()


def cmd_table(args) -> int:
    path = Path(args.runlog)
    if not path.is_file():
        raise ConfigError(f"run log {path} not found")
    records = read_runlog(path)
    if args.participant is not None:
        records = [r for r in records if r.participant == args.participant]
    if not records:
        raise ConfigError(f"run log {path} has no rows")
    columns, rows = build_table(records, args.metric)
    render = render_table_csv if args.format == "csv" else render_table_text
    sys.stdout.write(render(columns, rows))
    return EXIT_OK


# ------------------------------------------------------------------- validate


def forecast_windows(n_samples: int, rate_hz: float) -> int:
    n50 = n_samples if rate_hz == TARGET_HZ else int(math.floor((n_samples - 1) / rate_hz * TARGET_HZ + 1e-9)) + 1
    return 0 if n50 < WINDOW_LEN else (n50 - WINDOW_LEN) // WINDOW_STEP + 1


def validate_root(root) -> tuple[list[str], list[str]]:
    """Return (report lines, problems)."""
    root = Path(root)
    if (root / "manifest.json").is_file():
        dirs = [root]
    else:
        dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file()) if root.is_dir() else []
    if not dirs:
        return [], [f"no manifest.json found under {root}"]
    report, problems = [], []
    for d in dirs:
        try:
            recs = load_recordings(d)
            rate = float(read_manifest(d)["sample_rate_hz"])
            if rate < TARGET_HZ:
                problems.append(f"{d.name}: sample rate {rate} Hz is below {TARGET_HZ} Hz")
        except DataError as exc:
            problems.append(f"{d.name}: {exc}")
            continue
        inventory: dict[str, dict[str, int]] = {}
        for r in recs:
            per = inventory.setdefault(r.participant_id, {})
            per[r.activity_label] = per.get(r.activity_label, 0) + forecast_windows(len(r), rate)
        report.append(f"{d.name}: OK, {len(recs)} recordings at {rate:g} Hz, "
                      f"{len(build_registry(r.activity_label for r in recs))} classes")
        for participant, classes in sorted(inventory.items()):
            report.append(f"  {participant}: {sum(classes.values())} windows")
            for label, n in sorted(classes.items()):
                flag = ""
                if n < 3:
                    flag = "  <-- below the 3-window split minimum"
                    problems.append(f"{d.name}/{participant}: class {label!r} has {n} windows (< 3)")
                report.append(f"    {label}: {n}{flag}")
    return report, problems


def cmd_validate(args) -> int:
    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"give a data root or set ${DATA_ROOT_ENV}")
    report, problems = validate_root(root)
    for line in report:
        print(line)
    for p in problems:
        print(f"ERROR {p}", file=sys.stderr)
    return EXIT_DATA if problems else EXIT_OK


# ------------------------------------------------------------------ gen-synth


def cmd_gen_synth(args) -> int:
    signals = default_class_signals(args.classes)
    recs = synth_recordings(signals, args.windows_per_class, args.seed, args.participants, TARGET_HZ)
    if args.rate != TARGET_HZ:
        raise ConfigError("gen-synth writes 50 Hz data only")
    write_dataset(args.out, recs)
    print(f"wrote {len(recs)} recordings to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"taskvae {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="expand and execute a sweep")
    p.add_argument("--config", help="sweep JSON file")
    p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic dataset")
    p.add_argument("--dataset", action="append")
    p.add_argument("--participant", action="append")
    p.add_argument("--scenario", action="append")
    p.add_argument("--strategy", action="append", help=f"one of {', '.join(STRATEGIES)} or 'all'")
    p.add_argument("--budget", action="append", help="total exemplars, 'eq-vae' or 'all'")
    p.add_argument("--seeds", type=int, help="number of seeds (0..N-1)")
    p.add_argument("--seed-list", type=int, nargs="+")
    p.add_argument("--data-root", help=f"defaults to ${DATA_ROOT_ENV}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-per-class", type=int, help="synthetic windows per class")
    p.add_argument("--p", type=float, help="confidence threshold for TaskVAE")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--keep-going", action="store_true")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("table", help="summarise a run log as mean final-task accuracy")
    p.add_argument("runlog")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--metric", choices=("act", "nct", "oct"), default="act")
    p.add_argument("--participant")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("validate", help="check a data root")
    p.add_argument("data_root", nargs="?")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset in the CSV + manifest format")
    p.add_argument("out")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--windows-per-class", type=int, default=100)
    p.add_argument("--participants", nargs="+", default=["P0"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=TARGET_HZ)
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TaskVAEError as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
