"""Class-incremental run orchestration and run-log persistence."""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSplit, WindowSet, build_dataset, load_recordings, synth_dataset
from .errors import ConfigError, TaskVAEError
from .generator import FilterConfig
from .metrics import (
    EQ_VAE_PER_TASK, MetricsRecord, compute_metrics, per_class_accuracy,
)
from .models import ClassifierModel, TrainConfig, train
from .replay import MemoryBudget
from .scenarios import assign_classes, check_feasible, parse_scenario, task_stream
from .strategies import EXEMPLAR_STRATEGIES, STRATEGIES, derive_seed, make_strategy

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = (
    "dataset", "participant", "scenario", "strategy", "budget", "seed", "task",
    "act", "nct", "oct", "seconds", "memory_bytes",
)


class RunError(TaskVAEError, RuntimeError):
    def __init__(self, task: int, cause: BaseException):
        self.task = task
        self.cause = cause
        super().__init__(f"run failed at task {task}: {type(cause).__name__}: {cause}")


@dataclass
class SynthConfig:
    n_classes: int = 6
    n_per_class: int = 100
    data_seed: int = 0


@dataclass
class RunConfig:
    scenario: str
    strategy: str
    budget: str = "eq-vae"
    seed: int = 0
    dataset: str = "synthetic"
    participant: str | None = None
    data_root: str | None = None
    split_seed: int = 0
    class_seed: int | None = None  # defaults to ``seed``
    train_seed: int | None = None  # defaults to ``seed``
    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    eq_vae_per_task: int = EQ_VAE_PER_TASK
    ewc_lambda: float = 100.0
    lucir_margin: float = 0.5
    lucir_k: int = 2
    lucir_lambda_base: float = 5.0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.filter, dict):
            self.filter = FilterConfig(**self.filter)
        if isinstance(self.synthetic, dict):
            self.synthetic = SynthConfig(**self.synthetic)
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        self.budget = normalize_budget(self.budget)
        parse_scenario(self.scenario)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_budget(budget) -> str:
    b = str(budget).strip().lower()
    if b in ("eq-vae", "all"):
        return b
    try:
        n = int(b)
    except ValueError:
        raise ConfigError(f"budget must be a positive integer, 'eq-vae' or 'all'; got {budget!r}") from None
    if n <= 0:
        raise ConfigError(f"budget must be positive, got {n}")
    return str(n)


def resolve_budget(budget: str, n_tasks: int, n_available: int, per_task: int = EQ_VAE_PER_TASK) -> MemoryBudget:
    if budget == "eq-vae":
        return MemoryBudget.per_task(per_task, n_tasks)
    if budget == "all":
        return MemoryBudget(n_available, n_tasks)
    return MemoryBudget(int(budget), n_tasks)


def load_split(cfg: RunConfig) -> DatasetSplit:
    if cfg.dataset == "synthetic":
        s = cfg.synthetic
        return synth_dataset(s.n_classes, s.n_per_class, s.data_seed)
    if not cfg.data_root:
        raise ConfigError(f"dataset {cfg.dataset!r} needs a data root (or use the synthetic dataset)")
    root = Path(cfg.data_root) / cfg.dataset
    ds = build_dataset(load_recordings(root), cfg.participant, cfg.split_seed)
    ds.meta["dataset"] = cfg.dataset
    return ds


def _validation_loss(model: ClassifierModel, ws: WindowSet) -> float | None:
    if len(ws) == 0:
        return None
    model.eval()
    with torch.no_grad():
        return float(F.cross_entropy(model(torch.from_numpy(ws.x)), model.label_index(ws.y)))


def run_scenario(cfg: RunConfig, ds: DatasetSplit | None = None) -> list[MetricsRecord]:
    """One class-incremental run: one record per task, evaluated on the
    cumulative test set after the task's final epoch."""
    torch.set_num_threads(1)
    ds = ds if ds is not None else load_split(cfg)
    sc = parse_scenario(cfg.scenario)
    check_feasible(cfg.dataset, sc, len(ds.class_registry))
    class_seed = cfg.seed if cfg.class_seed is None else cfg.class_seed
    train_seed = cfg.seed if cfg.train_seed is None else cfg.train_seed
    specs = assign_classes(sc, ds.class_registry.values(), derive_seed(class_seed, "classes"))
    stream = task_stream(specs, ds)

    budget = None
    if cfg.strategy in EXEMPLAR_STRATEGIES:
        n_avail = len(ds.train.select_classes(specs[-1].seen_classes))
        budget = resolve_budget(cfg.budget, sc.n_tasks, n_avail, cfg.eq_vae_per_task)
    strategy = make_strategy(
        cfg.strategy, budget=budget, train_cfg=cfg.train, seed=train_seed,
        options={k: getattr(cfg, k) for k in ("ewc_lambda", "lucir_margin", "lucir_k", "lucir_lambda_base")},
        filter_cfg=cfg.filter, checkpoint_dir=cfg.checkpoint_dir,
    )
    model = ClassifierModel([], head=strategy.head, seed=derive_seed(train_seed, "init"))

    records = []
    for task in stream:
        t = task.spec.task_index
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                replay = strategy.replay_set(model, task)
            model.add_classes(task.spec.new_classes, seed=derive_seed(train_seed, "head", t))
            merged = WindowSet.concat([task.train, replay])
            counts = merged.class_counts()
            imbalance = max(counts.values()) / min(counts.values())
            if imbalance > 1.5:
                log.info("task %d: merged training set class imbalance %.2f", t, imbalance)
            tcfg = TrainConfig(**{**cfg.train.to_dict(), "seed": derive_seed(train_seed, "train", t)})
            trace = train(model, merged, tcfg, strategy.loss_fn(model, task))
            val_loss = _validation_loss(model, task.validation)
            strategy.end_task(model, task)
            pred = strategy.predict(model, task.test)
            act, nct, oct_ = compute_metrics(task.test.y, pred, task.spec.new_classes, task.spec.seen_classes)
        except TaskVAEError as exc:
            raise RunError(t, exc) from exc
        except (ValueError, RuntimeError) as exc:
            raise RunError(t, exc) from exc
        records.append(MetricsRecord(
            dataset=cfg.dataset,
            participant=cfg.participant or "",
            scenario=str(sc),
            strategy=cfg.strategy,
            budget=cfg.budget,
            seed=cfg.seed,
            task=t,
            act=act,
            nct=nct,
            oct=oct_,
            seconds=time.perf_counter() - t0,
            memory_bytes=strategy.memory_bytes(),
            per_class=per_class_accuracy(task.test.y, pred),
            extra={
                "new_classes": list(task.spec.new_classes),
                "n_train": len(task.train),
                "n_replay": len(replay),
                "imbalance": imbalance,
                "train_loss": trace,
                "val_loss": val_loss,
                "warnings": [str(w.message) for w in caught],
            },
        ))
    return records


# ------------------------------------------------------------------ run log


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


class RunLogWriter:
    """Append-only CSV writer; every row is flushed so a crash keeps what finished.

    Provenance goes on leading ``#`` comment lines.
    """

    def __init__(self, path, provenance: Iterable[str] = ()):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="")
        for line in provenance:
            self._fh.write(f"# {line}\n")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(RUNLOG_COLUMNS)
        self._fh.flush()

    def write(self, records: Iterable[MetricsRecord]):
        for r in records:
            self._writer.writerow([_fmt(getattr(r, c)) for c in RUNLOG_COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_runlog(path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = set(RUNLOG_COLUMNS) - set(rows.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: run log lacks columns {sorted(missing)}")
        out = []
        for row in rows:
            opt = lambda k: float(row[k]) if row[k] != "" else None  # noqa: E731
            out.append(MetricsRecord(
                dataset=row["dataset"], participant=row["participant"], scenario=row["scenario"],
                strategy=row["strategy"], budget=row["budget"], seed=int(row["seed"]),
                task=int(row["task"]), act=float(row["act"]), nct=opt("nct"), oct=opt("oct"),
                seconds=float(row["seconds"] or 0), memory_bytes=int(row["memory_bytes"] or 0),
            ))
    return out


def final_task_records(records: Iterable[MetricsRecord]) -> list[MetricsRecord]:
    last: dict[tuple, MetricsRecord] = {}
    for r in records:
        key = (r.dataset, r.participant, r.scenario, r.strategy, r.budget, r.seed)
        if key not in last or r.task > last[key].task:
            last[key] = r
    return list(last.values())


def mean_final(records: Iterable[MetricsRecord], metric: str) -> float:
    vals = [getattr(r, metric) for r in final_task_records(records)]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")
