"""Per-task VAE fitting and confidence-filtered synthetic exemplar generation."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .data import CHANNELS, WindowSet
from .errors import DataError
from .models import TrainConfig, VaeModel, train, vae_step_loss

log = logging.getLogger(__name__)

SYNTHETIC_PARTICIPANT = "synthetic"


class ShortfallWarning(UserWarning):
    """Attempt budget ran out before every class quota was met."""

    def __init__(self, shortfall: Mapping[int, int], attempts: int):
        self.shortfall = dict(shortfall)
        self.attempts = attempts
        super().__init__(f"generation shortfall after {attempts} attempts: {self.shortfall}")


@dataclass
class LatentBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise ValueError("latent bounds need lower <= upper element-wise")

    @property
    def dim(self):
        return len(self.lower)


@dataclass(frozen=True)
class FilterConfig:
    p: float = 0.60
    max_attempts_per_accepted: int = 50

    def __post_init__(self):
        # p == 0 switches the filter off
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"confidence threshold must lie in [0, 1], got {self.p}")
        if self.max_attempts_per_accepted < 1:
            raise ValueError("max_attempts_per_accepted must be >= 1")


@dataclass
class SyntheticBatch:
    windows: WindowSet
    source_task: int
    confidences: np.ndarray
    attempts: int = 0
    passed_filter: int = 0
    shortfall: dict[int, int] = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        """Fraction of drawn latents whose confidence cleared the threshold."""
        return self.passed_filter / self.attempts if self.attempts else 1.0


def fit_task_vae(task_train: WindowSet, cfg: TrainConfig, checkpoint_path=None) -> VaeModel:
    """Train one VAE on a task's classes. The per-epoch loss trace is kept on
    ``vae.train_trace``; ``vae.checkpoint_bytes`` is set when a path is given."""
    if len(task_train) == 0:
        raise DataError("cannot fit a task VAE on empty data")
    classes = task_train.classes()
    counts = task_train.class_counts()
    batch = cfg.batch_size
    smallest = min(counts.values())
    if smallest < batch / 4:
        batch = max(2, 4 * smallest)
        log.info("task VAE: smallest class has %d windows, batch size reduced %d -> %d",
                 smallest, cfg.batch_size, batch)
    run_cfg = TrainConfig(**{**cfg.to_dict(), "batch_size": batch})
    vae = VaeModel(classes, cfg.latent_dim, cfg.leaky_slope, seed=cfg.seed)
    vae.train_trace = train(vae, task_train, run_cfg, vae_step_loss(run_cfg))
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        vae.checkpoint_bytes = save_checkpoint(vae, checkpoint_path)
    return vae


@torch.no_grad()
def encode_means(vae: VaeModel, ws: WindowSet, batch_size: int = 512) -> np.ndarray:
    vae.eval()
    out = [vae.encode(torch.from_numpy(ws.x[s:s + batch_size]))[0].double().numpy()
           for s in range(0, len(ws), batch_size)]
    return np.concatenate(out)


def bounds_from_means(mu: np.ndarray) -> LatentBounds:
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 2 or len(mu) == 0:
        raise ValueError("need a non-empty (n, d) array of latent means")
    return LatentBounds(mu.min(axis=0), mu.max(axis=0))


def latent_bounds(vae: VaeModel, task_train: WindowSet) -> LatentBounds:
    """Per-dimension min/max of encoder means over the task's training windows."""
    if len(task_train) == 0:
        raise DataError("latent bounds need at least one training window")
    return bounds_from_means(encode_means(vae, task_train))


def sample_latents(b: LatentBounds, n: int, seed) -> np.ndarray:
    """``n`` latent vectors drawn uniformly inside the bounding box."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return b.lower + (b.upper - b.lower) * rng.random((n, b.dim))


def target_counts(new_task_train: WindowSet, old_classes: Iterable[int]) -> dict[int, int]:
    """Each old class gets the mean per-class size of the new task (round half up)."""
    counts = new_task_train.class_counts()
    if not counts:
        raise DataError("target sizing needs a non-empty new-task training set")
    mean = sum(counts.values()) / len(counts)
    n = int(math.floor(mean + 0.5))
    return {int(c): n for c in old_classes}


def filter_decisions(probs: np.ndarray, need: dict[int, int], p: float) -> list[tuple[int, int, float]]:
    """Walk candidates in draw order; return (row, local label, confidence) for accepted rows.

    ``need`` (keyed by local label) is decremented in place.
    """
    accepted = []
    conf = probs.max(axis=1)
    label = probs.argmax(axis=1)
    for i, (c, lab) in enumerate(zip(conf, label)):
        if c >= p and need.get(int(lab), 0) > 0:
            need[int(lab)] -= 1
            accepted.append((i, int(lab), float(c)))
            if not any(need.values()):
                break
    return accepted


@torch.no_grad()
def generate_filtered(
    vae: VaeModel,
    bounds: LatentBounds,
    targets: Mapping[int, int],
    fcfg: FilterConfig,
    seed,
    source_task: int = 0,
    chunk: int = 256,
) -> SyntheticBatch:
    """Sample latents, label them with the latent classifier, keep those whose
    top probability reaches ``fcfg.p`` while their class quota is open, decode."""
    if not targets:
        raise ValueError("targets must be non-empty")
    if any(n < 0 for n in targets.values()):
        raise ValueError("target counts must be non-negative")
    unknown = set(targets) - set(vae.classes)
    if unknown:
        raise ValueError(f"targets name classes {sorted(unknown)} that this VAE does not model")
    vae.eval()
    local = {c: i for i, c in enumerate(vae.classes)}
    need = {local[c]: int(n) for c, n in targets.items()}
    budget = fcfg.max_attempts_per_accepted * sum(need.values())
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    zs, labels, confs = [], [], []
    attempts = passed = 0
    while any(need.values()) and attempts < budget:
        n = min(chunk, budget - attempts)
        z = sample_latents(bounds, n, rng)
        probs = vae.latent_probs(torch.as_tensor(z, dtype=torch.float32)).double().numpy()
        acc = filter_decisions(probs, need, fcfg.p)
        used = acc[-1][0] + 1 if not any(need.values()) else n
        attempts += used
        passed += int((probs[:used].max(axis=1) >= fcfg.p).sum())
        for i, lab, c in acc:
            zs.append(z[i])
            labels.append(vae.classes[lab])
            confs.append(c)

    shortfall = {vae.classes[k]: v for k, v in need.items() if v > 0}
    if shortfall:
        log.warning("synthetic generation for task %d fell short: %s", source_task, shortfall)
        warnings.warn(ShortfallWarning(shortfall, attempts), stacklevel=2)

    if zs:
        z = torch.as_tensor(np.stack(zs), dtype=torch.float32)
        x = torch.cat([vae.decode(z[s:s + 512]) for s in range(0, len(z), 512)]).numpy()
        ws = WindowSet(x, labels, np.full(len(labels), SYNTHETIC_PARTICIPANT, dtype=object))
    else:
        ws = WindowSet.empty()
    return SyntheticBatch(ws, source_task, np.asarray(confs), attempts, passed, shortfall)


def export_windows_csv(path, ws: WindowSet, synthetic: bool = True, registry: Mapping[str, int] | None = None):
    """One row per time step, tagged with window index and a ``synthetic`` flag."""
    names = {v: k for k, v in (registry or {}).items()}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("window", "participant", "label", *CHANNELS, "synthetic"))
        flag = "true" if synthetic else "false"
        for i in range(len(ws)):
            label = names.get(int(ws.y[i]), int(ws.y[i]))
            for col in ws.x[i].T:
                w.writerow((i, ws.participants[i], label, *(f"{v:.6g}" for v in col), flag))
