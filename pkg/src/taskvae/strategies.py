"""Replay strategies plugged into the shared class-incremental loop.

Each strategy sees the same classifier, optimiser and epoch count; they differ
only in the replay set they contribute and the auxiliary loss terms.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import WindowSet
from .generator import (
    FilterConfig, fit_task_vae, generate_filtered, latent_bounds, target_counts,
)
from .models import ClassifierModel, TrainConfig, embed, predict
from .replay import (
    ExemplarStore, MemoryBudget, NearestMeanClassifier, ewc_penalty, fisher_diag,
    herding_select, icarl_loss, less_forget_loss, less_forget_weight,
    margin_ranking_loss, random_select,
)
from .scenarios import TaskData

log = logging.getLogger(__name__)

STRATEGIES = ("random", "ewc_replay", "icarl", "lucir", "taskvae", "taskvae_nofilter", "finetune")
EXEMPLAR_STRATEGIES = ("random", "ewc_replay", "icarl", "lucir")


def derive_seed(*keys) -> int:
    """Stable 31-bit seed from a tuple of ints / strings."""
    ints = [k if isinstance(k, int) else int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:8], "little")
            for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0] & 0x7FFFFFFF)


class Strategy:
    name = "finetune"
    head = "linear"

    def __init__(self, budget: MemoryBudget | None, train_cfg: TrainConfig, seed: int, options: dict | None = None):
        self.budget = budget
        self.train_cfg = train_cfg
        self.seed = seed
        self.options = options or {}
        self.prev_model: ClassifierModel | None = None

    def replay_set(self, model: ClassifierModel, task: TaskData) -> WindowSet:
        return WindowSet.empty()

    def loss_fn(self, model: ClassifierModel, task: TaskData):
        def fn(m, xb, yb, gen):
            return F.cross_entropy(m(xb), m.label_index(yb))
        return fn

    def end_task(self, model: ClassifierModel, task: TaskData):
        pass

    def predict(self, model: ClassifierModel, ws: WindowSet) -> np.ndarray:
        return predict(model, ws)

    def memory_bytes(self) -> int:
        return 0


class Finetune(Strategy):
    name = "finetune"


class RandomReplay(Strategy):
    name = "random"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.store = ExemplarStore(self.budget)

    def replay_set(self, model, task):
        return self.store.windows

    def select(self, model, task: TaskData, n: int) -> WindowSet:
        return random_select(task.train, n, derive_seed(self.seed, "exemplars", task.spec.task_index))

    def end_task(self, model, task):
        t = task.spec.task_index
        n = self.budget.allocation(t) if t < self.budget.n_tasks else 0
        n = min(n, self.budget.total - len(self.store), len(task.train))
        if n > 0:
            self.store.add(self.select(model, task, n), t)

    def memory_bytes(self):
        return self.store.nbytes()


class EwcReplay(RandomReplay):
    name = "ewc_replay"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.lam = float(self.options.get("ewc_lambda", 100.0))
        self.fishers = []

    def loss_fn(self, model, task):
        fishers, lam = self.fishers, self.lam

        def fn(m, xb, yb, gen):
            loss = F.cross_entropy(m(xb), m.label_index(yb))
            for fd in fishers:
                loss = loss + ewc_penalty(m, fd, lam)
            return loss
        return fn

    def end_task(self, model, task):
        super().end_task(model, task)
        self.fishers.append(fisher_diag(model, task.train, seed=derive_seed(self.seed, "fisher", task.spec.task_index)))

    def memory_bytes(self):
        fisher = sum(2 * sum(f.numel() * f.element_size() for f in fd.fisher.values()) for fd in self.fishers)
        return super().memory_bytes() + fisher


class _Distilling(RandomReplay):
    """Keeps a frozen copy of the classifier from the end of the previous task."""

    def replay_set(self, model, task):
        if task.spec.task_index > 0:
            self.prev_model = copy.deepcopy(model).eval()
            for p in self.prev_model.parameters():
                p.requires_grad_(False)
        return self.store.windows

    def select(self, model, task, n):
        return herding_select(task.train, n, lambda x: embed(model, x))


class ICaRL(_Distilling):
    name = "icarl"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.nme = None

    def loss_fn(self, model, task):
        prev = self.prev_model
        n_old = len(task.spec.old_classes)

        def fn(m, xb, yb, gen):
            logits = m(xb)
            prev_logits = None
            if prev is not None:
                with torch.no_grad():
                    prev_logits = prev(xb)
            return icarl_loss(logits, m.label_index(yb), n_old, prev_logits)
        return fn

    def end_task(self, model, task):
        super().end_task(model, task)
        ex = self.store.windows
        self.nme = NearestMeanClassifier().fit(embed(model, ex.x), ex.y)

    def predict(self, model, ws):
        return self.nme.predict(embed(model, ws.x))


class LUCIR(_Distilling):
    name = "lucir"
    head = "cosine"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.margin = float(self.options.get("lucir_margin", 0.5))
        self.k = int(self.options.get("lucir_k", 2))
        self.lambda_base = float(self.options.get("lucir_lambda_base", 5.0))

    def loss_fn(self, model, task):
        prev = self.prev_model
        n_old = len(task.spec.old_classes)
        lam = less_forget_weight(self.lambda_base, n_old, len(task.spec.new_classes))

        def fn(m, xb, yb, gen):
            target = m.label_index(yb)
            feats = m.features(xb)
            cos = m.head.cosine(feats)
            loss = F.cross_entropy(m.head.eta * cos, target)
            if prev is not None and n_old:
                with torch.no_grad():
                    prev_feats = prev.features(xb)
                loss = loss + lam * less_forget_loss(feats, prev_feats)
                loss = loss + margin_ranking_loss(cos, target, n_old, self.margin, self.k)
            return loss
        return fn


class TaskVAE(Strategy):
    name = "taskvae"

    def __init__(self, *args, filter_cfg: FilterConfig | None = None, checkpoint_dir=None, **kw):
        super().__init__(*args, **kw)
        self.filter_cfg = filter_cfg or FilterConfig()
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.vaes = []  # (task index, vae, bounds)
        self.last_batches = []

    def replay_set(self, model, task):
        if not self.vaes:
            return WindowSet.empty()
        batches = []
        for t, vae, bounds in self.vaes:
            targets = target_counts(task.train, vae.classes)
            seed = derive_seed(self.seed, "generate", task.spec.task_index, t)
            batches.append(generate_filtered(vae, bounds, targets, self.filter_cfg, seed, source_task=t))
        self.last_batches = batches
        return WindowSet.concat(b.windows for b in batches)

    def end_task(self, model, task):
        t = task.spec.task_index
        cfg = TrainConfig(**{**self.train_cfg.to_dict(), "seed": derive_seed(self.seed, "vae", t)})
        path = None
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            path = self.checkpoint_dir / f"task{t}.vae"
        vae = fit_task_vae(task.train, cfg, path)
        self.vaes.append((t, vae, latent_bounds(vae, task.train)))

    def memory_bytes(self):
        return sum(v.parameter_bytes() for _, v, _ in self.vaes)


class TaskVAENoFilter(TaskVAE):
    name = "taskvae_nofilter"

    def __init__(self, *args, filter_cfg: FilterConfig | None = None, **kw):
        base = filter_cfg or FilterConfig()
        super().__init__(*args, filter_cfg=FilterConfig(0.0, base.max_attempts_per_accepted), **kw)


_REGISTRY = {cls.name: cls for cls in (Finetune, RandomReplay, EwcReplay, ICaRL, LUCIR, TaskVAE, TaskVAENoFilter)}


def make_strategy(name: str, **kw) -> Strategy:
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}") from None
    if not issubclass(cls, TaskVAE):
        kw.pop("filter_cfg", None)
        kw.pop("checkpoint_dir", None)
    return cls(**kw)
