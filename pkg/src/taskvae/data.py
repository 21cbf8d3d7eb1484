"""Sensor ingestion: resampling, windowing, stratified splits, normalisation.

Windows are carried around as a :class:`WindowSet`, a stacked ``(N, 6, 128)``
float32 array with parallel label / participant arrays. A single
:class:`Window` is what you get when indexing one element.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

CHANNELS = ("acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z")
CSV_HEADER = ("participant", "label") + CHANNELS
N_CHANNELS = 6
WINDOW_LEN = 128
WINDOW_STEP = 64
TARGET_HZ = 50.0


@dataclass
class RawRecording:
    participant_id: str
    activity_label: str
    sample_rate_hz: float
    channels: np.ndarray  # (6, L) float64

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != N_CHANNELS:
            raise DataError(
                f"recording {self.participant_id}/{self.activity_label}: expected "
                f"6 channels, got array of shape {self.channels.shape}"
            )
        if not self.sample_rate_hz > 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.channels)):
            raise DataError(
                f"recording {self.participant_id}/{self.activity_label} contains NaN/Inf"
            )

    def __len__(self):
        return self.channels.shape[1]


@dataclass(frozen=True)
class Window:
    values: np.ndarray  # (6, 128) float32
    label: int
    participant_id: str


class WindowSet:
    """Stacked windows. Indexing with an int yields a :class:`Window`;
    indexing with a slice / index array yields a new ``WindowSet``."""

    def __init__(self, x, y, participants=None):
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.ndim != 3 or x.shape[1:] != (N_CHANNELS, WINDOW_LEN):
            raise DataError(f"windows must be (N, 6, 128), got {x.shape}")
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(y) != len(x):
            raise DataError(f"{len(x)} windows but {len(y)} labels")
        if participants is None:
            participants = np.full(len(x), "", dtype=object)
        participants = np.asarray(participants, dtype=object).reshape(-1)
        if len(participants) != len(x):
            raise DataError("participant array length mismatch")
        self.x = x
        self.y = y
        self.participants = participants

    @classmethod
    def empty(cls) -> WindowSet:
        return cls(np.zeros((0, N_CHANNELS, WINDOW_LEN), np.float32), np.zeros(0, np.int64))

    @classmethod
    def from_windows(cls, windows: Sequence[Window]) -> WindowSet:
        if len(windows) == 0:
            return cls.empty()
        return cls(
            np.stack([w.values for w in windows]),
            [w.label for w in windows],
            [w.participant_id for w in windows],
        )

    @classmethod
    def concat(cls, sets: Iterable[WindowSet]) -> WindowSet:
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.x for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.participants for s in sets]),
        )

    def __len__(self):
        return len(self.y)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Window(self.x[idx], int(self.y[idx]), str(self.participants[idx]))
        return WindowSet(self.x[idx], self.y[idx], self.participants[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))

    def select_classes(self, classes: Iterable[int]) -> WindowSet:
        return self[np.isin(self.y, list(classes))]

    def class_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.y, return_counts=True)
        return {int(c): int(n) for c, n in zip(labels, counts)}


@dataclass
class NormStats:
    mean: np.ndarray  # (6,)
    std: np.ndarray  # (6,)

    def apply(self, ws: WindowSet) -> WindowSet:
        x = (ws.x - self.mean[None, :, None]) / self.std[None, :, None]
        return WindowSet(x, ws.y, ws.participants)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class DatasetSplit:
    train: WindowSet
    validation: WindowSet
    test: WindowSet
    class_registry: dict[str, int]
    norm: NormStats | None = None
    meta: dict = field(default_factory=dict)

    def descriptor(self) -> dict:
        """JSON-ready summary: per-class/per-split counts and normalisation."""
        names = {v: k for k, v in self.class_registry.items()}
        counts = {}
        for split_name, ws in (("train", self.train), ("validation", self.validation), ("test", self.test)):
            cc = ws.class_counts()
            counts[split_name] = {names.get(c, str(c)): cc.get(c, 0) for c in sorted(names)}
        return {
            "class_registry": dict(self.class_registry),
            "counts": counts,
            "normalization": self.norm.to_dict() if self.norm is not None else None,
            **self.meta,
        }

    def write_descriptor(self, path):
        Path(path).write_text(json.dumps(self.descriptor(), indent=2))


# --------------------------------------------------------------------------- ops


def resample(rec: RawRecording, target_hz: float = TARGET_HZ) -> RawRecording:
    """Down-sample to ``target_hz``.

    Integer rate ratios keep every k-th sample (no anti-alias filter);
    other ratios linearly interpolate onto a uniform grid starting at t=0.
    """
    if target_hz <= 0:
        raise DataError(f"target rate must be positive, got {target_hz}")
    if len(rec) == 0:
        raise DataError(f"recording {rec.participant_id}/{rec.activity_label} is empty")
    src = rec.sample_rate_hz
    if target_hz > src * (1 + 1e-12):
        raise DataError(f"upsampling from {src} Hz to {target_hz} Hz is not supported")

    ratio = src / target_hz
    k = round(ratio)
    if abs(ratio - k) < 1e-9:
        out = rec.channels[:, ::k].copy()
    else:
        n = len(rec)
        t_src = np.arange(n) / src
        n_out = int(math.floor((n - 1) / src * target_hz + 1e-9)) + 1
        t_out = np.arange(n_out) / target_hz
        out = np.stack([np.interp(t_out, t_src, ch) for ch in rec.channels])
    return RawRecording(rec.participant_id, rec.activity_label, float(target_hz), out)


def window(
    rec: RawRecording,
    registry: Mapping[str, int],
    length: int = WINDOW_LEN,
    overlap: float = 0.5,
) -> list[Window]:
    """Cut a recording into fixed windows; the trailing partial segment is dropped."""
    if length != WINDOW_LEN:
        raise DataError(f"only {WINDOW_LEN}-sample windows are supported")
    step = int(round(length * (1 - overlap)))
    if rec.activity_label not in registry:
        raise DataError(f"label {rec.activity_label!r} missing from class registry")
    label = registry[rec.activity_label]
    n = len(rec)
    if n < length:
        log.warning(
            "recording %s/%s has %d samples (< %d); no windows produced",
            rec.participant_id, rec.activity_label, n, length,
        )
        return []
    vals = rec.channels.astype(np.float32)
    return [
        Window(vals[:, off:off + length].copy(), label, rec.participant_id)
        for off in range(0, n - length + 1, step)
    ]


def build_registry(labels: Iterable[str]) -> dict[str, int]:
    return {lab: i for i, lab in enumerate(sorted(set(labels)))}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int, train_frac: float = 0.8, val_frac_of_train: float = 0.1) -> tuple[int, int, int]:
    """(train, val, test) sizes for a class of ``n`` windows."""
    n_test = max(1, int(math.floor(n * (1 - train_frac) + 1e-9)))
    n_train_pre = n - n_test
    n_val = max(1, _round_half_up(val_frac_of_train * n_train_pre))
    return n_train_pre - n_val, n_val, n_test


def split(
    windows: WindowSet | Sequence[Window],
    seed: int,
    train_frac: float = 0.8,
    val_frac_of_train: float = 0.1,
    registry: Mapping[str, int] | None = None,
) -> DatasetSplit:
    """Stratified train/validation/test split, shuffled per class."""
    ws = windows if isinstance(windows, WindowSet) else WindowSet.from_windows(windows)
    if registry is None:
        registry = {str(c): c for c in ws.classes()}
    known = set(registry.values())
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for c in ws.classes():
        if c not in known:
            raise DataError(f"class id {c} not present in the class registry")
        idx = np.flatnonzero(ws.y == c)
        if len(idx) < 3:
            name = next((k for k, v in registry.items() if v == c), c)
            raise DataError(f"class {name!r} has only {len(idx)} windows; at least 3 are required")
        idx = rng.permutation(idx)
        n_train, n_val, n_test = split_counts(len(idx), train_frac, val_frac_of_train)
        parts["test"].append(idx[:n_test])
        parts["val"].append(idx[n_test:n_test + n_val])
        parts["train"].append(idx[n_test + n_val:])
    pick = {k: ws[np.concatenate(v) if v else np.zeros(0, int)] for k, v in parts.items()}
    return DatasetSplit(pick["train"], pick["val"], pick["test"], dict(registry))


def fit_norm(ws: WindowSet) -> NormStats:
    mean = ws.x.mean(axis=(0, 2), dtype=np.float64)
    std = ws.x.std(axis=(0, 2), dtype=np.float64)
    std = np.where(std < 1e-8, 1.0, std)
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def normalize_split(ds: DatasetSplit) -> DatasetSplit:
    """Per-channel z-score using train statistics, applied to every split."""
    stats = fit_norm(ds.train)
    return DatasetSplit(
        stats.apply(ds.train), stats.apply(ds.validation), stats.apply(ds.test),
        dict(ds.class_registry), stats, dict(ds.meta),
    )


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class ClassSignal:
    """Generator parameters for one synthetic activity class.

    ``orientation`` is the per-channel offset (the gravity / posture component);
    the oscillation is a sinusoid with a random phase per window.
    """

    freq_hz: float
    amplitude: float = 1.0
    noise: float = 0.2
    orientation: tuple[float, ...] = (0.0,) * N_CHANNELS


def default_class_signals(
    n_classes: int, offset_scale: float = 4.0, band_hz: tuple[float, float] = (0.25, 1.5)
) -> list[ClassSignal]:
    """Pairwise-distinct families differing in frequency and orientation; equal
    amplitude and noise keep per-class variability comparable.

    Frequencies are spread evenly over ``band_hz``, roughly the range of
    everyday movement cadences.
    """
    lo, hi = band_hz
    out = []
    for c in range(n_classes):
        u = np.random.default_rng(1000 + c).standard_normal(N_CHANNELS)
        u = offset_scale * u / np.linalg.norm(u)
        out.append(ClassSignal(
            freq_hz=lo + (hi - lo) * c / max(n_classes - 1, 1),
            amplitude=1.0,
            noise=0.3,
            orientation=tuple(float(v) for v in u),
        ))
    return out


# Fixed per-channel gain and phase so channels are correlated but not identical.
_CHANNEL_GAIN = np.array([1.0, 0.8, 0.6, 0.5, 0.7, 0.9])
_CHANNEL_PHASE = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5])


def _class_signal(sig: ClassSignal, n_samples: int, rng: np.random.Generator, fs: float = TARGET_HZ):
    t = np.arange(n_samples) / fs
    phase = rng.uniform(0, 2 * np.pi)
    base = np.sin(2 * np.pi * sig.freq_hz * t[None, :] + phase + _CHANNEL_PHASE[:, None])
    x = sig.amplitude * _CHANNEL_GAIN[:, None] * base + np.asarray(sig.orientation)[:, None]
    return x + sig.noise * rng.standard_normal((N_CHANNELS, n_samples))


def synth_windows(
    signals: Sequence[ClassSignal], n_per_class: int, seed: int, participant: str = "synthetic"
) -> WindowSet:
    if len(signals) < 2:
        raise DataError("synthetic datasets need at least 2 classes")
    if n_per_class < 3:
        raise DataError(f"n_per_class must be >= 3, got {n_per_class}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c, sig in enumerate(signals):
        for _ in range(n_per_class):
            xs.append(_class_signal(sig, WINDOW_LEN, rng))
            ys.append(c)
    return WindowSet(np.stack(xs), ys, np.full(len(ys), participant, dtype=object))


def synth_dataset(
    signals: Sequence[ClassSignal] | int,
    n_per_class: int,
    seed: int,
    normalize: bool = True,
) -> DatasetSplit:
    """Desk-scale stand-in for a HAR participant: one class per signal family."""
    if isinstance(signals, int):
        signals = default_class_signals(signals)
    ws = synth_windows(signals, n_per_class, seed)
    registry = {f"class{c}": c for c in range(len(signals))}
    ds = split(ws, seed=seed, registry=registry)
    ds.meta = {"dataset": "synthetic", "n_per_class": n_per_class, "seed": seed}
    return normalize_split(ds) if normalize else ds


def synth_recordings(
    signals: Sequence[ClassSignal], windows_per_class: int, seed: int,
    participants: Sequence[str] = ("P0",), sample_rate_hz: float = TARGET_HZ,
) -> list[RawRecording]:
    """Continuous recordings that yield ``windows_per_class`` windows each once cut."""
    rng = np.random.default_rng(seed)
    n_samples = WINDOW_LEN + WINDOW_STEP * (windows_per_class - 1)
    recs = []
    for p in participants:
        for c, sig in enumerate(signals):
            recs.append(RawRecording(p, f"class{c}", sample_rate_hz, _class_signal(sig, n_samples, rng, sample_rate_hz)))
    return recs


# --------------------------------------------------------------------- file io


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if "sample_rate_hz" not in manifest or "files" not in manifest:
        raise DataError(f"{path}: manifest needs 'sample_rate_hz' and 'files'")
    if not float(manifest["sample_rate_hz"]) > 0:
        raise DataError(f"{path}: sample_rate_hz must be positive")
    return manifest


def read_recording_csv(path, sample_rate_hz: float) -> list[RawRecording]:
    """Parse one recording CSV. Rows are grouped into contiguous runs of
    (participant, label); windows never straddle a label change."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing recording file {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        segments: list[tuple[str, str, list]] = []
        for lineno, row in enumerate(reader, start=2):
            key = (row["participant"], row["label"])
            try:
                vals = [float(row[c]) for c in CHANNELS]
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: non-numeric sensor value") from exc
            if not segments or segments[-1][:2] != key:
                segments.append((key[0], key[1], []))
            segments[-1][2].append(vals)
    recs = []
    for participant, label, rows in segments:
        try:
            recs.append(RawRecording(participant, label, sample_rate_hz, np.asarray(rows).T))
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from exc
    return recs


def write_recording_csv(path, rec: RawRecording):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for col in rec.channels.T:
            w.writerow([rec.participant_id, rec.activity_label, *(f"{v:.6g}" for v in col)])


def write_dataset(root, recordings: Sequence[RawRecording]):
    """Write recordings plus manifest in the on-disk layout read by :func:`load_recordings`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rates = {r.sample_rate_hz for r in recordings}
    if len(rates) != 1:
        raise DataError("all recordings in one dataset must share a sample rate")
    files = []
    for i, rec in enumerate(recordings):
        name = f"{rec.participant_id}_{rec.activity_label}_{i:03d}.csv"
        write_recording_csv(root / name, rec)
        files.append(name)
    (root / "manifest.json").write_text(json.dumps({"sample_rate_hz": rates.pop(), "files": files}, indent=2))


def load_recordings(root) -> list[RawRecording]:
    manifest = read_manifest(root)
    rate = float(manifest["sample_rate_hz"])
    recs = []
    for name in manifest["files"]:
        recs.extend(read_recording_csv(Path(root) / name, rate))
    return recs


def build_dataset(recordings: Sequence[RawRecording], participant: str | None, seed: int) -> DatasetSplit:
    """Resample to 50 Hz, window, split and normalise one participant's data."""
    recs = [r for r in recordings if participant is None or r.participant_id == participant]
    if not recs:
        raise DataError(f"no recordings for participant {participant!r}")
    registry = build_registry(r.activity_label for r in recs)
    windows: list[Window] = []
    for r in recs:
        windows.extend(window(resample(r, TARGET_HZ), registry))
    ds = split(windows, seed=seed, registry=registry)
    ds.meta = {"participant": participant}
    return normalize_split(ds)
