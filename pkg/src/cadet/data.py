"""Dataset ingestion, deterministic splitting and feature normalization.

Supported inputs: MNIST-style IDX binaries (big-endian, magic 0x00000803 for
images and 0x00000801 for labels) and a feature CSV with header
``label,f0,f1,...``. Both feed identical downstream code.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .pipeline import Sample

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class RawDataset:
    """Flattened images in [0, 1] with integer labels."""

    images: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    source: tuple[str, ...]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )


@dataclass(frozen=True)
class BatchSchedule:
    """Class-incremental arrival order plus the held-out auxiliary classes."""

    batches: tuple[tuple[int, ...], ...]
    aux_classes: tuple[int, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for classes in self.batches:
            if not classes:
                raise ConfigError("every batch must list at least one class")
            if seen & set(classes):
                raise ConfigError("batch class lists must be pairwise disjoint")
            seen.update(classes)
        if seen & set(self.aux_classes):
            raise ConfigError("auxiliary OOD classes must not appear in any batch")


def _read_be_u32(f, path) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(">I", data)[0]


def load_idx(images_path, labels_path) -> RawDataset:
    """Parse an IDX image/label pair; pixel bytes are scaled by 1/255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic = _read_be_u32(f, images_path)
        if magic != IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, "
                f"expected 0x{IMAGE_MAGIC:08x}"
            )
        count = _read_be_u32(f, images_path)
        rows = _read_be_u32(f, images_path)
        cols = _read_be_u32(f, images_path)
        body = f.read()
        if len(body) != count * rows * cols:
            raise FormatError(
                f"{images_path}: expected {count * rows * cols} pixel bytes, "
                f"got {len(body)}"
            )
        pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic = _read_be_u32(f, labels_path)
        if magic != LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, "
                f"expected 0x{LABEL_MAGIC:08x}"
            )
        n_labels = _read_be_u32(f, labels_path)
        body = f.read()
        if len(body) != n_labels:
            raise FormatError(
                f"{labels_path}: expected {n_labels} label bytes, got {len(body)}"
            )
        labels = np.frombuffer(body, dtype=np.uint8).astype(np.int64)
    if count != n_labels:
        raise FormatError(
            f"image count {count} does not pair with label count {n_labels}"
        )
    if count == 0:
        raise DataError(f"{images_path}: dataset is empty")
    return RawDataset(
        pixels.astype(np.float64) / 255.0,
        labels,
        (str(images_path), str(labels_path)),
    )


def write_idx(images_path, labels_path, pixel_bytes: np.ndarray, labels) -> None:
    """Write an IDX pair from uint8 pixels shaped (N, rows, cols)."""
    pixel_bytes = np.asarray(pixel_bytes, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixel_bytes.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(pixel_bytes.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())


def load_feature_csv(path) -> list[Sample]:
    """Read samples from a ``label,f0,f1,...`` CSV. Row order is preserved."""
    path = Path(path)
    samples: list[Sample] = []
    width = None
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: missing header row") from None
        if len(header) < 2 or header[0] != "label":
            raise FormatError(f"{path}: header must be 'label,f0,f1,...'")
        for lineno, row in enumerate(reader, start=2):
            if len(header) != len(row):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}"
                )
            try:
                label = int(row[0])
                feats = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if width is None:
                width = feats.size
            elif feats.size != width:
                raise FormatError(
                    f"{path}:{lineno}: feature width {feats.size} != {width}"
                )
            samples.append(Sample(feats, label, batch_id=-1, sample_id=len(samples)))
    if not samples:
        raise DataError(f"{path}: no data rows")
    return samples


def write_feature_csv(path, samples) -> None:
    """Write samples with full-precision features (round-trip safe)."""
    with open(path, "w", newline="\n") as f:
        width = samples[0].features.size
        f.write("label," + ",".join(f"f{i}" for i in range(width)) + "\n")
        for s in samples:
            f.write(
                str(s.label) + "," + ",".join(repr(float(v)) for v in s.features) + "\n"
            )


def stratified_split(samples, spec: SplitSpec) -> tuple[list[Sample], list[Sample]]:
    """Per-class seeded shuffle, then a floor(fraction * count) prefix split."""
    by_class: dict[int, list[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    train: list[Sample] = []
    test: list[Sample] = []
    for c in sorted(by_class):
        group = by_class[c]
        if len(group) < 2:
            raise DataError(f"class {c} has only {len(group)} sample(s); cannot split")
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([int(spec.seed), int(c)]))
        )
        order = rng.permutation(len(group))
        n_train = int(spec.train_fraction * len(group))
        train.extend(group[i] for i in order[:n_train])
        test.extend(group[i] for i in order[n_train:])
    return train, test


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray  # floored at 1e-8


def fit_normalization(train_samples) -> NormalizationStats:
    if not train_samples:
        raise DataError("normalization needs a non-empty training set")
    X = np.stack([s.features for s in train_samples])
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), 1e-8)
    return NormalizationStats(mean, std)


def apply_normalization(samples, stats: NormalizationStats) -> list[Sample]:
    return [
        Sample((s.features - stats.mean) / stats.std, s.label, s.batch_id, s.sample_id)
        for s in samples
    ]


def normalize_features(train_samples, *other_sets):
    """Z-score every set using statistics frozen from ``train_samples``.

    Returns (normalized_train, *normalized_others, stats).
    """
    stats = fit_normalization(train_samples)
    out = [apply_normalization(train_samples, stats)]
    out.extend(apply_normalization(s, stats) for s in other_sets)
    return (*out, stats)


def build_stream(
    train_samples, schedule: BatchSchedule
) -> tuple[list[list[Sample]], dict[int, int]]:
    """Assemble per-batch sample lists plus the oracle's ground-truth map.

    Batch 0 keeps its labels (the baseline is fully labeled); later batches
    are emitted unlabeled. Samples of classes outside the schedule are
    dropped.
    """
    truth = {s.sample_id: s.label for s in train_samples}
    stream: list[list[Sample]] = []
    for batch_id, classes in enumerate(schedule.batches):
        members = [s for s in train_samples if s.label in classes]
        if not members:
            raise DataError(f"batch {batch_id} has no samples for classes {classes}")
        if batch_id == 0:
            stream.append(
                [Sample(s.features, s.label, 0, s.sample_id) for s in members]
            )
        else:
            stream.append(
                [Sample(s.features, None, batch_id, s.sample_id) for s in members]
            )
    return stream, truth
