"""Datasets, vibration preprocessing and the synthetic two-domain benchmark."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

SOURCE, TARGET = "source", "target"


class DataError(ValueError):
    pass


class LabeledSample(NamedTuple):
    id: int
    features: np.ndarray
    label: int
    domain: str


@dataclass
class Dataset:
    """Feature matrix with labels and stable integer ids.

    ``classes`` is the size of the full label set Y. ``present`` records Y_sub
    when the set was produced by :func:`filter_target_classes`.
    """

    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    domain: str = SOURCE
    classes: int = 10
    present: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.x.shape}")
        n = len(self.ids)
        if self.x.shape[0] != n or self.y.shape != (n,):
            raise DataError("ids, features and labels disagree in length")
        if len(np.unique(self.ids)) != n:
            raise DataError("sample ids are not unique")
        if n and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise DataError(f"label outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield LabeledSample(int(self.ids[i]), self.x[i], int(self.y[i]), self.domain)

    def subset(self, mask) -> "Dataset":
        return replace(self, ids=self.ids[mask], x=self.x[mask], y=self.y[mask])

    def with_labels(self, y) -> "Dataset":
        return replace(self, y=np.asarray(y))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.classes)

    def equals(self, other: "Dataset") -> bool:
        return (self.ids.tobytes() == other.ids.tobytes() and self.x.tobytes() == other.x.tobytes()
                and self.y.tobytes() == other.y.tobytes() and self.x.shape == other.x.shape)


# ------------------------------------------------------------- preprocessing

@dataclass(frozen=True)
class PreprocessConfig:
    native_rate: int = 12000
    target_rate: int = 12000
    segment_length: int = 1024
    segments: int = 200
    output_dim: int = 512

    def __post_init__(self):
        if self.segment_length != 2 * self.output_dim:
            raise DataError("segment_length must be twice output_dim")
        if self.segments < 1:
            raise DataError("segments must be >= 1")


def downsample(signal, native_rate: int, target_rate: int = 12000) -> np.ndarray:
    """Block-average then decimate by the integer ratio native/target."""
    signal = np.asarray(signal, dtype=np.float64)
    if native_rate < target_rate or native_rate % target_rate:
        raise DataError(f"{native_rate} Hz -> {target_rate} Hz is not an integer decimation; "
                        "resample the recording externally first")
    ratio = native_rate // target_rate
    if ratio == 1:
        return signal.copy()
    n = len(signal) // ratio
    return signal[:n * ratio].reshape(n, ratio).mean(axis=1)


def spectrum(segment: np.ndarray, output_dim: int = 512) -> np.ndarray:
    """FFT magnitudes of bins ``0..output_dim-1`` divided by the segment length."""
    segment = np.asarray(segment, dtype=np.float64)
    return np.abs(np.fft.rfft(segment, axis=-1)[..., :output_dim]) / segment.shape[-1]


def segment_and_fft(recording, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Split into non-overlapping segments and return one spectrum row per segment."""
    recording = np.asarray(recording, dtype=np.float64)
    L = cfg.segment_length
    available = len(recording) // L
    if available < 1:
        raise DataError(f"recording has {len(recording)} points, need at least {L}")
    n = min(available, cfg.segments)
    if n < cfg.segments:
        log.warning("recording yields %d of %d segments", n, cfg.segments)
    segs = recording[:n * L].reshape(n, L)
    return spectrum(segs, cfg.output_dim)


def preprocess_recording(recording, label: int, cfg: PreprocessConfig = PreprocessConfig(),
                         first_id: int = 0, classes: int = 10, domain: str = SOURCE) -> Dataset:
    sig = downsample(recording, cfg.native_rate, cfg.target_rate)
    feats = segment_and_fft(sig, cfg)
    n = len(feats)
    return Dataset(np.arange(first_id, first_id + n), feats, np.full(n, label), domain, classes)


def read_recording(path) -> np.ndarray:
    """Plain text, one sample per line."""
    return np.loadtxt(path, dtype=np.float64, ndmin=1)


# --------------------------------------------------------- synthetic benchmark

@dataclass(frozen=True)
class SyntheticConfig:
    """Class-specific tone mixtures; the target domain rescales and shifts them.

    When ``prototypes`` is None they are drawn from ``seed``: each class gets
    ``tones_per_class`` bins in ``[low_bin, high_bin)`` with amplitudes in
    ``amplitude_range``. ``freq_jitter`` perturbs every tone's frequency per
    sample (uniform, in bins). ``interference_tones`` adds that many fixed
    tones, shared by every class, to target-domain signals only.
    """

    num_classes: int = 10
    source_train: int = 20
    source_test: int = 20
    target_train: int = 30
    target_test: int = 20
    segment_length: int = 1024
    tones_per_class: int = 60
    low_bin: int = 5
    high_bin: int = 490
    amplitude_range: tuple[float, float] = (8.0, 16.0)
    amplitude_scale: float = 1.5
    bin_offset: int = 2
    noise: float = 0.05
    freq_jitter: float = 0.85
    interference_tones: int = 0
    interference_amplitude: float = 1.0
    prototypes: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "amplitude_range", tuple(self.amplitude_range))
        if self.num_classes < 2:
            raise DataError("need at least two classes")
        if min(self.source_train, self.source_test, self.target_train, self.target_test) < 1:
            raise DataError("every split needs at least one sample per class")
        if self.noise < 0 or self.freq_jitter < 0:
            raise DataError("noise and freq_jitter must be non-negative")
        half = self.segment_length // 2
        hi = self.high_bin + abs(self.bin_offset) + self.freq_jitter
        if self.prototypes is None:
            if not 0 < self.low_bin < self.high_bin or hi >= half:
                raise DataError(f"frequency bins must stay inside (0, {half})")
            if self.high_bin - self.low_bin < self.tones_per_class:
                raise DataError("bin range too narrow for tones_per_class")
        else:
            protos = tuple(tuple((float(b), float(a)) for b, a in cls) for cls in self.prototypes)
            object.__setattr__(self, "prototypes", protos)
            if len(protos) != self.num_classes:
                raise DataError("one prototype per class required")
            for cls in protos:
                for b, _ in cls:
                    if not 0 <= b + self.bin_offset < half or b >= half:
                        raise DataError(f"prototype bin {b} outside [0, {half})")

    def resolved_prototypes(self) -> list[list[tuple[float, float]]]:
        if self.prototypes is not None:
            return [list(c) for c in self.prototypes]
        rng = np.random.default_rng([self.seed, 0x5EED])
        lo, hi = self.amplitude_range
        protos = []
        for _ in range(self.num_classes):
            bins = np.sort(rng.choice(np.arange(self.low_bin, self.high_bin), self.tones_per_class,
                                      replace=False))
            amps = rng.uniform(lo, hi, self.tones_per_class)
            protos.append([(float(b), float(a)) for b, a in zip(bins, amps)])
        return protos

    def interference(self) -> list[float]:
        if not self.interference_tones:
            return []
        rng = np.random.default_rng([self.seed, 0x1F])
        hi = self.high_bin if self.prototypes is None else self.segment_length // 2 - 1
        return [float(b) for b in rng.choice(np.arange(1, hi), self.interference_tones, replace=False)]


class SyntheticBenchmark(NamedTuple):
    source: Dataset
    target: Dataset
    test: Dataset
    source_test: Dataset


def _synth_split(cfg: SyntheticConfig, protos, per_class: int, domain: str, first_id: int,
                 rng: np.random.Generator, interference=()) -> Dataset:
    L = cfg.segment_length
    t = np.arange(L)
    shift = cfg.bin_offset if domain == TARGET else 0
    gain = cfg.amplitude_scale if domain == TARGET else 1.0
    labels = np.repeat(np.arange(cfg.num_classes), per_class)
    signals = np.empty((len(labels), L))
    for i, c in enumerate(labels):
        sig = np.zeros(L)
        for b, a in protos[c]:
            f = b + shift + (rng.uniform(-cfg.freq_jitter, cfg.freq_jitter) if cfg.freq_jitter else 0.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            sig += gain * a * np.cos(2 * np.pi * f * t / L + phase)
        if domain == TARGET:
            for b in interference:
                sig += cfg.interference_amplitude * np.cos(2 * np.pi * b * t / L + rng.uniform(0.0, 2 * np.pi))
        if cfg.noise:
            sig += rng.normal(0.0, cfg.noise, L)
        signals[i] = sig
    feats = spectrum(signals, L // 2)
    ids = np.arange(first_id, first_id + len(labels))
    return Dataset(ids, feats, labels, domain, cfg.num_classes)


def synth_generate(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticBenchmark:
    """Source train, full target train, target test (all classes) and source test."""
    protos = cfg.resolved_prototypes()
    C = cfg.num_classes
    sizes = [cfg.source_train, cfg.target_train, cfg.target_test, cfg.source_test]
    domains = [SOURCE, TARGET, TARGET, SOURCE]
    out, first = [], 0
    for k, (n, dom) in enumerate(zip(sizes, domains)):
        rng = np.random.default_rng([cfg.seed, k])
        out.append(_synth_split(cfg, protos, n, dom, first, rng, cfg.interference()))
        first += n * C
    src, tgt, test, src_test = out
    return SyntheticBenchmark(src, tgt, test, src_test)


def filter_target_classes(target: Dataset, k: int, present: Optional[Sequence[int]] = None) -> Dataset:
    """Keep only labels ``< k`` (or the explicit ``present`` subset); features untouched."""
    if present is None:
        if not 1 <= k <= target.classes:
            raise DataError(f"k must be in [1, {target.classes}], got {k}")
        keep = tuple(range(k))
    else:
        keep = tuple(sorted(set(int(c) for c in present)))
        if not keep or keep[0] < 0 or keep[-1] >= target.classes:
            raise DataError(f"present classes must be a non-empty subset of [0, {target.classes})")
    out = target.subset(np.isin(target.y, keep))
    out.present = keep
    return out


# ------------------------------------------------------------------- CSV I/O

def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{j}" for j in range(ds.dim)])
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), int(ds.y[i])] + ["%.17g" % v for v in ds.x[i]])


def read_dataset(path, classes: Optional[int] = None, domain: str = SOURCE) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = len(header) - 2
        expected = ["id", "label"] + [f"f{j}" for j in range(d)]
        if d < 1 or header != expected:
            raise DataError(f"{path}:1: header must be id,label,f0,...,f{{d-1}}")
        ids, labels, feats = [], [], []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DataError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: id is not an integer: {row[0]!r}") from None
            try:
                labels.append(int(row[1]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: label is not an integer: {row[1]!r}") from None
            try:
                feats.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad feature value ({exc})") from None
    y = np.asarray(labels, dtype=np.int64)
    if classes is None:
        classes = int(y.max()) + 1 if len(y) else 1
    x = np.asarray(feats, dtype=np.float64).reshape(len(ids), d)
    return Dataset(np.asarray(ids), x, y, domain, classes)
