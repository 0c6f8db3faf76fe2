"""Ingestion, windowing, splitting and toy data for 1D sensor sequences."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .stats import condition_vectors


class DataError(ValueError):
    """Bad input data or an impossible data request."""


@dataclass
class CsvSchema:
    """Column mapping for raw recordings. WISDM raw files have no header and end rows with ';'."""

    subject: str = "subject"
    label: str = "activity"
    timestamp: str = "timestamp"
    channels: tuple[str, ...] = ("x", "y", "z")
    header: bool = True
    sample_rate: float = 20.0
    max_malformed: float = 0.01

    @property
    def columns(self) -> list[str]:
        return [self.subject, self.label, self.timestamp, *self.channels]


@dataclass
class RawRecording:
    channels: dict[str, np.ndarray]
    labels: np.ndarray
    sample_rate: float = 20.0
    subjects: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    skipped: int = 0

    def __post_init__(self):
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise DataError(f"channels have unequal lengths {sorted(lengths)}")
        if lengths and len(self.labels) != lengths.pop():
            raise DataError("labels do not cover every timestep")

    def __len__(self) -> int:
        return len(self.labels)

    def matrix(self) -> np.ndarray:
        return np.stack([self.channels[k] for k in self.channels])


@dataclass
class WindowSpec:
    window_len: int
    step: int
    label_rule: str = "majority"

    def __post_init__(self):
        if not 1 <= self.step <= self.window_len:
            raise DataError(f"window step must satisfy 1 <= step <= window_len, got {self.step}/{self.window_len}")
        if self.label_rule not in ("majority", "strict"):
            raise DataError(f"unknown label rule {self.label_rule!r}")


@dataclass
class SequenceSample:
    x0: np.ndarray  # (C, L)
    y: int
    f: np.ndarray = field(default=None)  # (C, 4L)
    source: str = "real"

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.y = int(self.y)
        if self.f is None:
            self.f = condition_vectors(self.x0)

    @property
    def channels(self) -> int:
        return self.x0.shape[0]

    @property
    def length(self) -> int:
        return self.x0.shape[1]


# -- ingestion -------------------------------------------------------------

def ingest_csv(path, schema: CsvSchema | None = None) -> RawRecording:
    """Read a recording; malformed rows are skipped unless they exceed ``schema.max_malformed``."""
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if schema.header:
        if not rows:
            raise DataError(f"empty file: {path}")
        header = [h.strip() for h in rows[0]]
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise DataError(f"missing columns {missing} in {path}")
        pos = {c: header.index(c) for c in schema.columns}
        rows = rows[1:]
    else:
        pos = {c: i for i, c in enumerate(schema.columns)}
    if not rows:
        raise DataError(f"empty file: {path}")

    subjects, labels, stamps = [], [], []
    values: list[list[float]] = [[] for _ in schema.channels]
    skipped = 0
    width = max(pos.values()) + 1
    for row in rows:
        row = [c.strip().rstrip(";").strip() for c in row]
        try:
            if len(row) < width:
                raise ValueError("short row")
            vals = [float(row[pos[c]]) for c in schema.channels]
            if not all(math.isfinite(v) for v in vals):
                raise ValueError("non-finite")
            label = row[pos[schema.label]]
            if label == "":
                raise ValueError("empty label")
        except ValueError:
            skipped += 1
            continue
        subjects.append(row[pos[schema.subject]])
        labels.append(label)
        stamps.append(row[pos[schema.timestamp]])
        for buf, v in zip(values, vals):
            buf.append(v)
    if skipped > schema.max_malformed * len(rows):
        raise DataError(f"{skipped} of {len(rows)} rows malformed in {path} (cap {schema.max_malformed:.0%})")
    return RawRecording(
        channels={c: np.asarray(v, dtype=np.float64) for c, v in zip(schema.channels, values)},
        labels=np.asarray(labels, dtype=object),
        sample_rate=schema.sample_rate,
        subjects=np.asarray(subjects, dtype=object),
        timestamps=np.asarray(stamps, dtype=object),
        skipped=skipped,
    )


def export_csv(rec: RawRecording, path, schema: CsvSchema | None = None) -> None:
    schema = schema or CsvSchema(channels=tuple(rec.channels))
    n = len(rec)
    subjects = rec.subjects if rec.subjects is not None else np.zeros(n, dtype=int)
    stamps = rec.timestamps if rec.timestamps is not None else np.arange(n)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if schema.header:
            w.writerow(schema.columns)
        for i in range(n):
            w.writerow([subjects[i], rec.labels[i], stamps[i], *(repr(float(rec.channels[c][i])) for c in schema.channels)])


# -- windowing ---------------------------------------------------------------

def window_count(n: int, spec: WindowSpec) -> int:
    return 0 if n < spec.window_len else (n - spec.window_len) // spec.step + 1


def _segments(rec: RawRecording) -> list[tuple[int, int]]:
    """Contiguous same-subject index ranges."""
    n = len(rec)
    if rec.subjects is None or n == 0:
        return [(0, n)]
    cuts = [0] + [i for i in range(1, n) if rec.subjects[i] != rec.subjects[i - 1]] + [n]
    return list(zip(cuts[:-1], cuts[1:]))


def _window_label(labels: Sequence, rule: str):
    values, first_idx, counts = np.unique(np.asarray(labels, dtype=object).astype(str), return_index=True, return_counts=True)
    if rule == "strict" and len(values) > 1:
        return None
    best = counts.max()
    # ties go to the label that appears earliest in the window
    tied = [(first_idx[i], labels[first_idx[i]]) for i in range(len(values)) if counts[i] == best]
    return min(tied, key=lambda t: t[0])[1]


def window(rec: RawRecording, spec: WindowSpec, label_map: dict | None = None) -> list[SequenceSample]:
    """Slide over each subject segment at offsets 0, step, 2*step, ...

    ``label_map`` turns raw labels into integer classes (sorted order when omitted).
    """
    if len(rec) < spec.window_len:
        raise DataError(f"recording of length {len(rec)} is shorter than window {spec.window_len}")
    if label_map is None:
        label_map = {lab: i for i, lab in enumerate(sorted({str(v) for v in rec.labels}))}
    data = rec.matrix()
    out = []
    for start, stop in _segments(rec):
        for k in range(window_count(stop - start, spec)):
            lo = start + k * spec.step
            hi = lo + spec.window_len
            lab = _window_label(list(rec.labels[lo:hi]), spec.label_rule)
            if lab is None:
                continue
            out.append(SequenceSample(data[:, lo:hi].copy(), label_map[str(lab)]))
    return out


# -- splitting / normalisation -------------------------------------------------

def split(data: Sequence, ratios: Sequence[float], seed: int, stratify: bool = True, labels=None):
    """Deterministic train/val/test partition.

    Stratified mode allocates each class separately, so per-class proportions
    match the global ones to within one sample.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise DataError(f"split ratios must be nonnegative and sum to 1, got {ratios.tolist()}")
    data = list(data)
    labels = np.asarray([s.y for s in data] if labels is None else labels)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in ratios]
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)] if stratify else [np.arange(len(data))]
    active = int(np.count_nonzero(ratios))
    for idx in groups:
        if stratify and len(idx) < active:
            raise DataError(f"class {labels[idx[0]]} has {len(idx)} samples, fewer than {active} splits")
        idx = rng.permutation(idx)
        bounds = _allocate(len(idx), ratios)
        for p, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            parts[p].extend(idx[lo:hi].tolist())
    return tuple([data[i] for i in sorted(p)] for p in parts)


def _allocate(n: int, ratios: np.ndarray) -> list[int]:
    """Cumulative boundaries by largest-remainder rounding, so counts are within 1 of ``n * ratio``."""
    raw = n * ratios
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return [0, *np.cumsum(counts).tolist()]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, samples: Sequence[SequenceSample]) -> "Normalizer":
        x = np.concatenate([s.x0 for s in samples], axis=1)
        std = x.std(axis=1)
        return cls(x.mean(axis=1), np.where(std > 1e-12, std, 1.0))

    def apply(self, samples: Sequence[SequenceSample]) -> list[SequenceSample]:
        return [SequenceSample((s.x0 - self.mean[:, None]) / self.std[:, None], s.y, source=s.source) for s in samples]


def imbalance_report(data) -> dict:
    labels = np.asarray([s.y if isinstance(s, SequenceSample) else s for s in data])
    if labels.size == 0:
        raise DataError("imbalance_report: no samples")
    classes, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return {
        "counts": {int(c): int(n) for c, n in zip(classes, counts)},
        "shares": {int(c): float(s) for c, s in zip(classes, p)},
        "ratio": float(counts.max() / counts.min()),
        "entropy": float(-(p * np.log(p)).sum()),
    }


def data_hash(samples: Sequence[SequenceSample]) -> str:
    """Content digest of a windowed dataset (values, labels, order)."""
    h = hashlib.sha256()
    for s in samples:
        h.update(np.int64(s.y).tobytes())
        h.update(np.asarray(s.x0.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(s.x0, dtype="<f8").tobytes())
    return h.hexdigest()


# -- windowed dataset files -------------------------------------------------

def save_windows(samples: Sequence[SequenceSample], path) -> None:
    """One row per window: label, synthetic flag, flattened ``C x L`` values; shape in ``<path>.header``."""
    path = Path(path)
    if not samples:
        raise DataError("save_windows: nothing to write")
    C, L = samples[0].x0.shape
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "synthetic", *(f"c{c}_{i}" for c in range(C) for i in range(L))])
        for s in samples:
            if s.x0.shape != (C, L):
                raise DataError(f"inconsistent window shape {s.x0.shape}, expected {(C, L)}")
            w.writerow([s.y, int(s.source == "synthetic"), *(repr(float(v)) for v in s.x0.reshape(-1))])
    header = Path(str(path) + ".header")
    header.write_text(f"channels={C}\nlength={L}\nrows={len(samples)}\nlayout=channel-major\n")


def load_windows(path) -> list[SequenceSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    header = Path(str(path) + ".header")
    meta = dict(line.split("=", 1) for line in header.read_text().split("\n") if "=" in line) if header.exists() else {}
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if not row:
                continue
            vals = np.array([float(v) for v in row[2:]])
            C = int(meta.get("channels", 1))
            out.append(SequenceSample(vals.reshape(C, -1), int(row[0]),
                                      source="synthetic" if row[1] == "1" else "real"))
    return out


# -- toy data --------------------------------------------------------------

def make_toy_dataset(n_classes: int = 2, length: int = 32, per_class: int = 100, seed: int = 0,
                     noise: float = 0.2, imbalance: float = 1.0, channels: int = 1,
                     phase_jitter: float = 0.0, offsets: Sequence[float] | None = None) -> list[SequenceSample]:
    """Class ``c`` is a sinusoid with class-specific frequency and amplitude plus Gaussian noise.

    With ``imbalance = r`` the last class keeps ``per_class / r`` samples and the
    others keep ``per_class``; ``noise = 0`` and ``phase_jitter = 0`` make
    every window of a class identical.
    """
    if n_classes < 2:
        raise DataError("make_toy_dataset needs at least 2 classes")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    offsets = list(offsets) if offsets is not None else [0.0] * n_classes
    out = []
    for c in range(n_classes):
        n = per_class if c < n_classes - 1 or imbalance == 1.0 else int(round(per_class / imbalance))
        freq = 1.0 + 1.5 * c
        amp = 1.0 + 0.25 * c
        for _ in range(n):
            rows = []
            for ch in range(channels):
                phase = 0.3 * ch + phase_jitter * rng.uniform(0.0, 2.0 * np.pi)
                sig = amp * np.sin(2.0 * np.pi * freq * t + phase) + offsets[c]
                rows.append(sig + noise * rng.standard_normal(length))
            out.append(SequenceSample(np.stack(rows), c))
    return out
