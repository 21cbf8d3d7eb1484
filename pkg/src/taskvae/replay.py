"""Real-exemplar replay machinery: budgets, exemplar stores, random and herding
selection, EWC, and the auxiliary losses used by iCaRL and LUCIR."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import WindowSet
from .errors import ConfigError, TopologyError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- budgeting


@dataclass(frozen=True)
class MemoryBudget:
    """Total exemplar budget ``S`` spread over ``T`` tasks as N = S/T.

    The remainder of the integer division goes to the earliest tasks.
    """

    total: int
    n_tasks: int

    def __post_init__(self):
        if self.total < 0 or self.n_tasks < 1:
            raise ConfigError(f"invalid budget S={self.total}, T={self.n_tasks}")

    @classmethod
    def per_task(cls, n: int, n_tasks: int) -> MemoryBudget:
        return cls(n * n_tasks, n_tasks)

    def allocations(self) -> list[int]:
        base, rem = divmod(self.total, self.n_tasks)
        return [base + (1 if t < rem else 0) for t in range(self.n_tasks)]

    def allocation(self, task: int) -> int:
        return self.allocations()[task]


class ExemplarStore:
    def __init__(self, budget: MemoryBudget):
        self.budget = budget
        self.windows = WindowSet.empty()
        self.source_task = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.windows)

    def add(self, ws: WindowSet, task: int):
        if len(self) + len(ws) > self.budget.total:
            raise ValueError(
                f"adding {len(ws)} exemplars would exceed the budget of {self.budget.total}"
            )
        self.windows = WindowSet.concat([self.windows, ws])
        self.source_task = np.concatenate([self.source_task, np.full(len(ws), task, dtype=np.int64)])

    def nbytes(self) -> int:
        return int(self.windows.x.nbytes)


def class_quotas(classes: Sequence[int], n: int) -> dict[int, int]:
    """Split ``n`` evenly over ``classes``; the remainder goes to the first ones."""
    base, rem = divmod(n, len(classes))
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(classes)}


def _clamp(task_data: WindowSet, n: int) -> int:
    if n > len(task_data):
        msg = f"requested {n} exemplars from {len(task_data)} windows; clamping"
        log.warning(msg)
        warnings.warn(msg, stacklevel=3)
        return len(task_data)
    return n


def _quotas_within(task_data: WindowSet, n: int) -> dict[int, int]:
    """Even per-class quotas, topped up from classes that still have room."""
    counts = task_data.class_counts()
    classes = sorted(counts)
    quotas = class_quotas(classes, n)
    spare = 0
    for c in classes:
        if quotas[c] > counts[c]:
            spare += quotas[c] - counts[c]
            quotas[c] = counts[c]
    for c in classes:
        take = min(spare, counts[c] - quotas[c])
        quotas[c] += take
        spare -= take
    return quotas


def random_select(task_data: WindowSet, n: int, seed) -> WindowSet:
    """Class-stratified uniform sample without replacement."""
    n = _clamp(task_data, n)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = []
    for c, k in _quotas_within(task_data, n).items():
        idx = np.flatnonzero(task_data.y == c)
        picks.append(rng.choice(idx, size=k, replace=False))
    return task_data[np.concatenate(picks).astype(np.int64)] if picks else WindowSet.empty()


def herding_order(features: np.ndarray, n: int) -> list[int]:
    """Greedy herding: each step adds the row whose inclusion brings the running
    exemplar mean closest (L2) to the mean of all rows. Ties go to the lowest index."""
    phi = np.asarray(features, dtype=np.float64)
    target = phi.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(target)
    available = np.ones(len(phi), dtype=bool)
    for k in range(1, min(n, len(phi)) + 1):
        cand = (running[None, :] + phi) / k
        dist = np.linalg.norm(target[None, :] - cand, axis=1)
        dist[~available] = np.inf
        # ties within rounding noise go to the lowest index
        i = int(np.flatnonzero(dist <= dist.min() + 1e-12 * max(1.0, dist.min()))[0])
        chosen.append(i)
        available[i] = False
        running += phi[i]
    return chosen


def l2_normalize(f: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.maximum(norm, 1e-12)


def herding_select(task_data: WindowSet, n: int, feature_fn: Callable[[np.ndarray], np.ndarray]) -> WindowSet:
    """Per-class herding in the L2-normalised space returned by ``feature_fn``."""
    n = _clamp(task_data, n)
    picks = []
    for c, k in _quotas_within(task_data, n).items():
        idx = np.flatnonzero(task_data.y == c)
        if len(idx) == 0:
            log.warning("herding: class %d has no windows; skipped", c)
            continue
        feats = l2_normalize(np.asarray(feature_fn(task_data.x[idx])))
        picks.append(idx[herding_order(feats, k)])
    return task_data[np.concatenate(picks).astype(np.int64)] if picks else WindowSet.empty()


# ---------------------------------------------------------------------- EWC


@dataclass
class FisherDiag:
    fisher: dict[str, torch.Tensor]
    anchor: dict[str, torch.Tensor]


def fisher_diag(model: nn.Module, data, seed: int = 0, max_samples: int | None = None) -> FisherDiag:
    """Empirical diagonal Fisher: mean over samples of the squared gradient of
    log p(y_hat | x), y_hat being the model's own prediction. ``data`` is a
    WindowSet or an (x, y) pair; labels are ignored."""
    x = torch.from_numpy(data.x) if isinstance(data, WindowSet) else torch.as_tensor(data[0])
    if max_samples is not None and len(x) > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(len(x), max_samples, replace=False))
        x = x[torch.from_numpy(idx)]
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    fisher = {n: torch.zeros_like(p) for n, p in params.items()}
    was_training = model.training
    model.eval()
    for i in range(len(x)):
        model.zero_grad()
        logp = F.log_softmax(model(x[i:i + 1]), dim=1)
        logp[0, logp[0].argmax()].backward()
        for n, p in params.items():
            if p.grad is not None:
                fisher[n] += p.grad.detach() ** 2
    model.zero_grad()
    model.train(was_training)
    for n in fisher:
        fisher[n] /= max(len(x), 1)
    return FisherDiag(fisher, {n: p.detach().clone() for n, p in params.items()})


def ewc_penalty(model: nn.Module, fd: FisherDiag, lam: float) -> torch.Tensor:
    """lam/2 * sum_i F_i (theta_i - theta*_i)^2.

    A parameter may have grown along its first axis since the anchor was taken
    (classifier head expansion); only the anchored leading slice is penalised.
    """
    params = dict(model.named_parameters())
    total = None
    for name, f in fd.fisher.items():
        if name not in params:
            raise TopologyError(f"Fisher entry {name!r} has no matching model parameter")
        p = params[name]
        if p.shape != f.shape:
            if p.ndim != f.ndim or p.shape[1:] != f.shape[1:] or p.shape[0] < f.shape[0]:
                raise TopologyError(f"{name}: model shape {tuple(p.shape)} vs Fisher {tuple(f.shape)}")
            p = p[: f.shape[0]]
        term = (f * (p - fd.anchor[name]) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return 0.5 * lam * total


# -------------------------------------------------------------------- iCaRL


def binary_kl(logits: torch.Tensor, target_logits: torch.Tensor) -> torch.Tensor:
    """Element-wise KL between Bernoulli(sigmoid(target)) and Bernoulli(sigmoid(logits)).

    Same gradient as BCE against sigmoided soft targets, but zero when the two agree.
    """
    q = torch.sigmoid(target_logits)
    return F.binary_cross_entropy_with_logits(logits, q, reduction="none") - \
        F.binary_cross_entropy_with_logits(target_logits, q, reduction="none")


def icarl_loss(logits: torch.Tensor, target_idx: torch.Tensor, n_old: int, prev_logits: torch.Tensor | None):
    """Sigmoid classification on the new outputs plus distillation of the previous
    model's old outputs; averaged over batch and output units."""
    onehot = F.one_hot(target_idx, logits.shape[1]).float()
    if prev_logits is None or n_old == 0:
        return F.binary_cross_entropy_with_logits(logits, onehot)
    cls = F.binary_cross_entropy_with_logits(logits[:, n_old:], onehot[:, n_old:], reduction="sum")
    dist = binary_kl(logits[:, :n_old], prev_logits[:, :n_old]).sum()
    return (cls + dist) / logits.numel()


def icarl_distillation(logits: torch.Tensor, prev_logits: torch.Tensor, n_old: int) -> torch.Tensor:
    return binary_kl(logits[:, :n_old], prev_logits[:, :n_old]).mean()


class NearestMeanClassifier:
    """Nearest class mean in L2-normalised feature space."""

    def __init__(self):
        self.classes = np.zeros(0, dtype=np.int64)
        self.means = np.zeros((0, 0))

    def fit(self, features: np.ndarray, labels: np.ndarray) -> NearestMeanClassifier:
        f = l2_normalize(np.asarray(features, dtype=np.float64))
        labels = np.asarray(labels)
        self.classes = np.unique(labels)
        self.means = l2_normalize(np.stack([f[labels == c].mean(axis=0) for c in self.classes]))
        return self

    def predict(self, features: np.ndarray) -> np.ndarray:
        f = l2_normalize(np.asarray(features, dtype=np.float64))
        d = ((f[:, None, :] - self.means[None, :, :]) ** 2).sum(-1)
        return self.classes[np.argmin(d, axis=1)]


# -------------------------------------------------------------------- LUCIR


def less_forget_loss(features: torch.Tensor, prev_features: torch.Tensor) -> torch.Tensor:
    """1 - cos(current embedding, previous embedding), averaged over the batch."""
    return (1 - F.cosine_similarity(features, prev_features, dim=1)).mean()


def less_forget_weight(lambda_base: float, n_old: int, n_new: int) -> float:
    return lambda_base * float(np.sqrt(n_old / n_new)) if n_new else 0.0


def margin_ranking_loss(cos: torch.Tensor, target_idx: torch.Tensor, n_old: int, margin: float = 0.5, k: int = 2):
    """Hinge between each old-class sample's ground-truth cosine score and its
    top-k new-class scores. Output units [0, n_old) are the old classes."""
    old = target_idx < n_old
    n_new = cos.shape[1] - n_old
    if n_old == 0 or n_new == 0 or not bool(old.any()):
        return cos.new_zeros(())
    c = cos[old]
    gt = c.gather(1, target_idx[old].view(-1, 1))
    hard = c[:, n_old:].topk(min(k, n_new), dim=1).values
    return F.relu(margin - gt + hard).mean()
