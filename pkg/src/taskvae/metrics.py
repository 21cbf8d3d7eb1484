"""ACT / NCT / OCT, run aggregation and exemplar-budget arithmetic."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

EQ_VAE_PER_TASK = 60
BYTES_PER_VALUE = 4  # float32 windows
WINDOW_BYTES = 6 * 128 * BYTES_PER_VALUE

METRICS = ("act", "nct", "oct")


@dataclass
class MetricsRecord:
    dataset: str
    participant: str
    scenario: str
    strategy: str
    budget: str
    seed: int
    task: int
    act: float
    nct: float | None
    oct: float | None
    seconds: float = 0.0
    memory_bytes: int = 0
    per_class: dict[int, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _acc(mask: np.ndarray, correct: np.ndarray) -> float | None:
    n = int(mask.sum())
    return float(correct[mask].sum()) / n if n else None


def compute_metrics(y_true, y_pred, new_classes: Iterable[int], seen_classes: Iterable[int]):
    """Return ``(act, nct, oct)``. OCT is ``None`` when no old class is present
    (first task); NCT likewise when no new-class sample is present."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("label and prediction arrays differ in length")
    seen = set(int(c) for c in seen_classes)
    new = set(int(c) for c in new_classes)
    stray = set(np.unique(y_true).tolist()) - seen
    if stray:
        raise ValueError(f"true labels {sorted(stray)} are outside the seen classes")
    if len(y_true) == 0:
        raise ValueError("no predictions to score")
    correct = y_true == y_pred
    is_new = np.isin(y_true, list(new))
    old = seen - new
    act = float(correct.mean())
    nct = _acc(is_new, correct)
    oct_ = _acc(~is_new, correct) if old else None
    return act, nct, oct_


def per_class_accuracy(y_true, y_pred) -> dict[int, float]:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    return {int(c): float((y_pred[y_true == c] == c).mean()) for c in np.unique(y_true)}


def exemplar_equivalent(vae_bytes: int, bytes_per_exemplar: int = WINDOW_BYTES) -> int:
    """How many stored windows fit in the memory of one task VAE."""
    if vae_bytes <= 0 or bytes_per_exemplar <= 0:
        raise ValueError("byte sizes must be positive")
    return vae_bytes // bytes_per_exemplar


def geometric_sizes(max_size: int, min_size: int = 100, steps: int = 4) -> list[int]:
    """``steps`` budgets from ``min_size`` to ``max_size`` in geometric progression."""
    if max_size < min_size:
        raise ValueError(f"max ({max_size}) must be >= min ({min_size})")
    ratio = max_size / min_size
    return [int(math.floor(min_size * ratio ** (k / (steps - 1)) + 0.5)) for k in range(steps)]


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {
        "n": int(len(v)),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "min": float(v.min()),
        "max": float(v.max()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
    }


def aggregate(records: Iterable[MetricsRecord]) -> dict[int, dict[str, dict]]:
    """Per task, per metric: mean / population std / min / max and quartiles.

    Undefined values (OCT at the first task) are skipped; a metric with no
    defined values is reported as ``None``.
    """
    records = list(records)
    keys = {(r.dataset, r.participant, r.scenario, r.strategy, r.budget) for r in records}
    if len(keys) > 1:
        raise ValueError(f"records mix several configurations: {sorted(keys)}")
    by_task: dict[int, dict[str, list]] = defaultdict(lambda: {m: [] for m in METRICS})
    for r in records:
        for m in METRICS:
            val = getattr(r, m)
            if val is not None:
                by_task[r.task][m].append(val)
    return {
        t: {m: (summarize(v) if v else None) for m, v in ms.items()}
        for t, ms in sorted(by_task.items())
    }
