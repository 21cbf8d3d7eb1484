"""Scenario strings ("4-5-2"), random class-to-task assignment and task streams."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetSplit, WindowSet
from .errors import DataError, ScenarioError

_SCENARIO_RE = re.compile(r"^\d+(-\d+)*$")

# Scenario lists per dataset, in the order they are reported.
SCENARIO_REGISTRY: dict[str, list[str]] = {
    "pamap2": ["6-4", "4-3-3", "5-3-2", "4-3-2-1", "2-3-4-1", "2-2-2-2-2", "5-1-1-1-1-1"],
    "hhar": ["3-3", "4-2", "2-2-2", "2-3-1", "3-2-1", "3-1-1-1", "2-1-1-1-1"],
    "realworld": ["5-3", "3-3-2", "4-2-2", "2-2-2-2", "4-2-1-1", "4-1-1-1-1", "2-3-1-1-1", "3-2-1-1-1"],
    "motionsense": ["3-3", "4-2", "2-2-2", "2-3-1", "3-2-1", "3-1-1-1", "2-1-1-1-1"],
    "uci_har": ["3-3", "4-2", "2-2-2", "2-3-1", "3-2-1", "3-1-1-1"],
}

# Per-participant class counts and the largest task count with enough data.
DATASET_LIMITS: dict[str, tuple[int, int]] = {
    "pamap2": (10, 6),
    "hhar": (6, 5),
    "realworld": (8, 5),
    "motionsense": (6, 5),
    "uci_har": (6, 4),
}


@dataclass(frozen=True)
class Scenario:
    counts: tuple[int, ...]

    @property
    def n_tasks(self) -> int:
        return len(self.counts)

    @property
    def n_classes(self) -> int:
        return sum(self.counts)

    def __str__(self):
        return "-".join(map(str, self.counts))


@dataclass(frozen=True)
class TaskSpec:
    task_index: int
    new_classes: tuple[int, ...]
    seen_classes: tuple[int, ...]

    @property
    def old_classes(self) -> tuple[int, ...]:
        new = set(self.new_classes)
        return tuple(c for c in self.seen_classes if c not in new)


@dataclass
class TaskData:
    spec: TaskSpec
    train: WindowSet
    validation: WindowSet
    test: WindowSet  # cumulative over seen classes


def parse_scenario(s: str) -> Scenario:
    s = str(s).strip().strip("()")
    if not _SCENARIO_RE.match(s):
        raise ScenarioError(f"malformed scenario {s!r}; expected e.g. '4-5-2'")
    counts = tuple(int(p) for p in s.split("-"))
    if any(c <= 0 for c in counts):
        raise ScenarioError(f"scenario {s!r}: every task needs at least one class")
    return Scenario(counts)


def check_feasible(dataset: str, sc: Scenario, n_classes: int | None = None):
    """Reject (dataset, scenario) pairs that cannot be run.

    Known corpora use their tabulated class and task limits; anything else
    is checked against ``n_classes`` alone.
    """
    limits = DATASET_LIMITS.get(dataset.lower())
    if limits is not None:
        max_classes, max_tasks = limits
        if n_classes is None:
            n_classes = max_classes
        if sc.n_tasks > max_tasks:
            raise ScenarioError(
                f"scenario {sc} is impossible for {dataset}: at most {max_tasks} tasks "
                "have enough data per class"
            )
    if n_classes is not None and sc.n_classes > n_classes:
        raise ScenarioError(
            f"scenario {sc} needs {sc.n_classes} classes but {dataset} has {n_classes}"
        )


def assign_classes(sc: Scenario, classes: Iterable[int], seed: int) -> list[TaskSpec]:
    pool = sorted(set(int(c) for c in classes))
    if sc.n_classes > len(pool):
        raise ScenarioError(
            f"scenario {sc} needs {sc.n_classes} classes but only {len(pool)} are available"
        )
    drawn = np.random.default_rng(seed).permutation(pool)[: sc.n_classes].tolist()
    specs, seen, pos = [], [], 0
    for t, k in enumerate(sc.counts):
        new = tuple(drawn[pos:pos + k])
        pos += k
        seen = seen + list(new)
        specs.append(TaskSpec(t, new, tuple(seen)))
    return specs


def task_stream(specs: Sequence[TaskSpec], ds: DatasetSplit) -> list[TaskData]:
    known = set(ds.class_registry.values())
    out = []
    for spec in specs:
        unknown = set(spec.seen_classes) - known
        if unknown:
            raise ScenarioError(f"task {spec.task_index}: classes {sorted(unknown)} not in registry")
        train = ds.train.select_classes(spec.new_classes)
        counts = train.class_counts()
        empty = [c for c in spec.new_classes if counts.get(c, 0) == 0]
        if empty:
            raise DataError(f"task {spec.task_index}: no training windows for classes {empty}")
        out.append(TaskData(
            spec,
            train,
            ds.validation.select_classes(spec.new_classes),
            ds.test.select_classes(spec.seen_classes),
        ))
    return out
