"""CL classifier CNN, per-task VAE, the composite VAE loss and a seeded trainer."""
from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import N_CHANNELS, WINDOW_LEN, WindowSet
from .errors import DataError, TrainingError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 64
    epochs: int = 20
    latent_dim: int = 64
    recon_coef: float = 1.0
    kl_coef: float = 0.001
    cls_coef: float = 1.0
    leaky_slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def to_dict(self):
        return asdict(self)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch RNG state without disturbing the global one."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def conv_block(c_in, c_out, k, act: nn.Module, pool: bool) -> nn.Sequential:
    layers = [nn.Conv1d(c_in, c_out, k, padding=k // 2), nn.BatchNorm1d(c_out), act]
    if pool:
        layers.append(nn.MaxPool1d(2, 2))
    return nn.Sequential(*layers)


# ---------------------------------------------------------------- classifier


class LinearHead(nn.Module):
    def __init__(self, in_features: int, n_out: int):
        super().__init__()
        self.in_features = in_features
        self.weight = nn.Parameter(torch.empty(n_out, in_features))
        self.bias = nn.Parameter(torch.empty(n_out))
        self._init_rows(self.weight.data, self.bias.data)

    def _init_rows(self, w, b):
        bound = 1 / math.sqrt(self.in_features)
        nn.init.uniform_(w, -bound, bound)
        nn.init.uniform_(b, -bound, bound)

    @property
    def n_out(self):
        return self.weight.shape[0]

    def expand(self, n_new: int):
        w = torch.empty(n_new, self.in_features)
        b = torch.empty(n_new)
        self._init_rows(w, b)
        self.weight = nn.Parameter(torch.cat([self.weight.data, w]))
        self.bias = nn.Parameter(torch.cat([self.bias.data, b]))

    def forward(self, f):
        return F.linear(f, self.weight, self.bias)


class CosineHead(nn.Module):
    """Scaled cosine similarity between normalised features and class weights."""

    def __init__(self, in_features: int, n_out: int, eta: float = 10.0):
        super().__init__()
        self.in_features = in_features
        self.weight = nn.Parameter(torch.empty(n_out, in_features))
        self.eta = nn.Parameter(torch.tensor(float(eta)))
        self._init_rows(self.weight.data)

    def _init_rows(self, w):
        bound = 1 / math.sqrt(self.in_features)
        nn.init.uniform_(w, -bound, bound)

    @property
    def n_out(self):
        return self.weight.shape[0]

    def expand(self, n_new: int):
        w = torch.empty(n_new, self.in_features)
        self._init_rows(w)
        self.weight = nn.Parameter(torch.cat([self.weight.data, w]))

    def cosine(self, f):
        return F.linear(F.normalize(f, dim=1), F.normalize(self.weight, dim=1))

    def forward(self, f):
        return self.eta * self.cosine(f)


class ClassifierModel(nn.Module):
    """Four conv blocks (16/32/32/64 filters, kernels 3/3/5/5), a 32-unit dense
    layer and an output head that grows as classes arrive.

    ``classes[i]`` is the dataset class id predicted by output unit ``i``.
    """

    FILTERS = (16, 32, 32, 64)
    KERNELS = (3, 3, 5, 5)
    HIDDEN = 32

    def __init__(self, classes: Sequence[int] = (), head: str = "linear", seed: int = 0):
        super().__init__()
        with seeded(seed):
            blocks, c_in = [], N_CHANNELS
            for c_out, k in zip(self.FILTERS, self.KERNELS):
                blocks.append(conv_block(c_in, c_out, k, nn.ReLU(), pool=True))
                c_in = c_out
            self.trunk = nn.Sequential(*blocks)
            flat = self.FILTERS[-1] * (WINDOW_LEN >> len(self.FILTERS))
            self.fc = nn.Linear(flat, self.HIDDEN)
            if head == "linear":
                self.head = LinearHead(self.HIDDEN, max(len(classes), 1))
            elif head == "cosine":
                self.head = CosineHead(self.HIDDEN, max(len(classes), 1))
            else:
                raise ValueError(f"unknown head {head!r}")
        self.head_kind = head
        self.classes: list[int] = list(classes)
        self._n_heads_real = len(classes)
        self._seed = seed

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def add_classes(self, new: Sequence[int], seed: int | None = None):
        """Append output units for ``new``; existing units keep their weights."""
        new = [int(c) for c in new if c not in self.classes]
        if not new:
            return
        seed = self._seed + 7919 * (len(self.classes) + 1) if seed is None else seed
        with seeded(seed), torch.no_grad():
            if self._n_heads_real == 0:
                # placeholder unit from construction with no classes
                kind = CosineHead if self.head_kind == "cosine" else LinearHead
                self.head = kind(self.HIDDEN, len(new))
            else:
                self.head.expand(len(new))
        self.classes.extend(new)
        self._n_heads_real = len(self.classes)

    def features(self, x):
        h = self.trunk(x)
        return F.relu(self.fc(h.flatten(1)))

    def forward(self, x):
        if x.ndim != 3 or x.shape[1:] != (N_CHANNELS, WINDOW_LEN):
            raise ValueError(f"expected input (N, 6, 128), got {tuple(x.shape)}")
        return self.head(self.features(x))

    def trunk_parameter_count(self) -> int:
        return sum(p.numel() for p in self.trunk.parameters())

    def label_index(self, labels) -> torch.Tensor:
        """Map dataset class ids to output-unit indices."""
        lut = {c: i for i, c in enumerate(self.classes)}
        return torch.as_tensor([lut[int(c)] for c in np.asarray(labels).reshape(-1)], dtype=torch.long)


# ----------------------------------------------------------------------- VAE


class VaeModel(nn.Module):
    """Encoder / decoder / latent classifier for the classes of one task.

    The decoder reshapes its 384-unit dense output to 16x24, doubles the
    length with each of three stride-2 transposed convolutions (24 -> 192)
    and centre-crops to 128 samples.
    """

    ENC_FILTERS = (16, 32, 64, 64, 64)
    ENC_KERNELS = (3, 3, 3, 5, 5)
    DEC_SEED_SHAPE = (16, 24)
    DEC_LAYERS = ((16, 5), (16, 3), (N_CHANNELS, 3))
    CLS_HIDDEN = 32

    def __init__(self, classes: Sequence[int], latent_dim: int = 64, leaky_slope: float = 0.01, seed: int = 0):
        super().__init__()
        if len(classes) == 0:
            raise ValueError("a task VAE needs at least one class")
        self.classes = [int(c) for c in classes]
        self.latent_dim = latent_dim
        self.leaky_slope = leaky_slope
        act = lambda: nn.LeakyReLU(leaky_slope)  # noqa: E731
        with seeded(seed):
            blocks, c_in = [], N_CHANNELS
            n = len(self.ENC_FILTERS)
            for i, (c_out, k) in enumerate(zip(self.ENC_FILTERS, self.ENC_KERNELS)):
                blocks.append(conv_block(c_in, c_out, k, act(), pool=i < n - 1))
                c_in = c_out
            self.encoder = nn.Sequential(*blocks)
            flat = self.ENC_FILTERS[-1] * (WINDOW_LEN >> (n - 1))
            self.fc_mu = nn.Linear(flat, latent_dim)
            self.fc_logvar = nn.Linear(flat, latent_dim)

            ch, length = self.DEC_SEED_SHAPE
            self.dec_fc = nn.Sequential(nn.Linear(latent_dim, ch * length), act())
            layers = []
            for i, (c_out, k) in enumerate(self.DEC_LAYERS):
                layers.append(nn.ConvTranspose1d(ch, c_out, k, stride=2, padding=k // 2, output_padding=1))
                if i < len(self.DEC_LAYERS) - 1:
                    layers.append(act())
                ch = c_out
            self.decoder = nn.Sequential(*layers)

            self.latent_classifier = nn.Sequential(
                nn.Linear(latent_dim, self.CLS_HIDDEN), act(), nn.Linear(self.CLS_HIDDEN, len(self.classes))
            )

    def architecture(self) -> dict:
        return {
            "kind": "vae",
            "classes": self.classes,
            "latent_dim": self.latent_dim,
            "leaky_slope": self.leaky_slope,
        }

    @staticmethod
    def _check(name, t):
        if not torch.isfinite(t).all():
            raise TrainingError(f"non-finite activations in VAE layer '{name}'")
        return t

    def encode(self, x):
        h = self._check("encoder", self.encoder(x)).flatten(1)
        return self._check("fc_mu", self.fc_mu(h)), self._check("fc_logvar", self.fc_logvar(h))

    def decode(self, z):
        h = self.dec_fc(z).view(-1, *self.DEC_SEED_SHAPE)
        out = self.decoder(h)
        start = (out.shape[-1] - WINDOW_LEN) // 2
        return out[..., start:start + WINDOW_LEN]

    def latent_logits(self, z):
        return self.latent_classifier(z)

    def latent_probs(self, z):
        return F.softmax(self.latent_logits(z), dim=1)

    def forward(self, x, noise):
        mu, logvar = self.encode(x)
        z = mu + torch.exp(0.5 * logvar) * noise
        recon = self._check("decoder", self.decode(z))
        probs = self._check("latent_classifier", self.latent_probs(z))
        return recon, mu, logvar, probs

    def parameter_bytes(self) -> int:
        return sum(p.numel() * p.element_size() for p in self.parameters())

    def label_index(self, labels) -> torch.Tensor:
        lut = {c: i for i, c in enumerate(self.classes)}
        return torch.as_tensor([lut[int(c)] for c in np.asarray(labels).reshape(-1)], dtype=torch.long)


def vae_loss(recon, x, mu, logvar, probs, labels, cfg: TrainConfig | None = None):
    """Return ``(total, recon, kl, cls)``.

    recon: MSE averaged over every element. kl: summed over latent dimensions,
    averaged over the batch. cls: cross-entropy of the latent classifier.
    """
    cfg = cfg or TrainConfig()
    if recon.shape != x.shape:
        raise ValueError(f"reconstruction {tuple(recon.shape)} vs input {tuple(x.shape)}")
    if mu.shape != logvar.shape:
        raise ValueError("mu / logvar shape mismatch")
    recon_term = F.mse_loss(recon, x)
    kl_term = (-0.5 * (1 + logvar - mu.pow(2) - logvar.exp())).sum(dim=1).mean()
    p_true = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    cls_term = -torch.log(p_true.clamp_min(1e-12)).mean()
    total = cfg.recon_coef * recon_term + cfg.kl_coef * kl_term + cfg.cls_coef * cls_term
    return total, recon_term, kl_term, cls_term


# -------------------------------------------------------------------- trainer


LossFn = Callable[[nn.Module, torch.Tensor, torch.Tensor, torch.Generator], torch.Tensor]


def as_tensors(data) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(data, WindowSet):
        return torch.from_numpy(data.x), torch.from_numpy(data.y)
    x, y = data
    return torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(y, dtype=torch.long)


def train(model: nn.Module, data, cfg: TrainConfig, loss_fn: LossFn, params=None) -> list[float]:
    """Adam over shuffled mini-batches; returns the mean loss of each epoch.

    ``loss_fn(model, xb, yb, gen)`` gets the shared generator so stochastic
    losses (VAE noise) stay reproducible.
    """
    x, y = as_tensors(data)
    if len(x) == 0:
        raise DataError("cannot train on an empty dataset")
    params = list(model.parameters()) if params is None else list(params)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    trace = []
    model.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(x), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and len(x) >= 2:
                # batch-norm needs two samples per batch; drop a lone straggler this epoch
                continue
            loss = loss_fn(model, x[idx], y[idx], gen)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        trace.append(total / max(seen, 1))
    model.eval()
    return trace


def classifier_ce(model, xb, yb, gen):
    return F.cross_entropy(model(xb), model.label_index(yb))


def vae_step_loss(cfg: TrainConfig):
    def fn(model: VaeModel, xb, yb, gen):
        noise = torch.randn(len(xb), model.latent_dim, generator=gen)
        recon, mu, logvar, probs = model(xb, noise)
        return vae_loss(recon, xb, mu, logvar, probs, model.label_index(yb), cfg)[0]
    return fn


@torch.no_grad()
def predict(model: ClassifierModel, ws: WindowSet, batch_size: int = 512) -> np.ndarray:
    """Predicted dataset class ids (argmax over the current head)."""
    model.eval()
    out = []
    for start in range(0, len(ws), batch_size):
        logits = model(torch.from_numpy(ws.x[start:start + batch_size]))
        out.append(logits.argmax(1).numpy())
    idx = np.concatenate(out) if out else np.zeros(0, int)
    return np.asarray(model.classes, dtype=np.int64)[idx] if len(idx) else idx.astype(np.int64)


@torch.no_grad()
def embed(model: ClassifierModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.eval()
    out = [model.features(torch.from_numpy(x[s:s + batch_size])).numpy() for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.HIDDEN), np.float32)
