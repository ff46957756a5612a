"""Long-tailed dataset construction, binary I/O and class samplers."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LTDS1"
_HEADER = struct.Struct("<5sIIIII")


@dataclass(frozen=True)
class ClassCensus:
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise ValueError("census needs at least one class")
        if min(counts) < 1:
            raise ValueError(f"every class needs at least one sample, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def imbalance_factor(self) -> float:
        return max(self.counts) / min(self.counts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images of shape (N, W, H, C) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, W, H, C), got shape {images.shape}")
        if len(labels) != len(images):
            raise ValueError("labels and images differ in length")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def census(self) -> ClassCensus:
        """Per-class counts; raises if any class is empty."""
        return ClassCensus(tuple(int(c) for c in self.class_counts))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


def longtailed_counts(n_max: int, num_classes: int, imbalance_factor: float) -> list[int]:
    """Exponentially decaying per-class counts with class 0 as the head.

    ``n_i = round(n_max * r ** (-i / (num_classes - 1)))``, rounded half up and
    clamped to at least one sample.
    """
    if imbalance_factor < 1:
        raise ValueError("imbalance factor must be >= 1")
    if imbalance_factor > n_max:
        raise ValueError(
            f"imbalance factor {imbalance_factor} exceeds the head count {n_max}: "
            "the tail class would have fewer than one sample"
        )
    if num_classes == 1:
        return [n_max]
    counts = []
    for i in range(num_classes):
        n = n_max * imbalance_factor ** (-i / (num_classes - 1))
        counts.append(max(1, math.floor(n + 0.5)))
    return counts


def build_longtailed(source: Dataset, imbalance_factor: float, seed: int) -> Dataset:
    """Subsample a balanced dataset into an exponentially long-tailed one.

    Within each class the kept samples are a seeded uniform draw without
    replacement, returned in ascending index order.
    """
    counts = tuple(source.class_counts)
    if len(set(counts)) != 1 or counts[0] < 1:
        raise ValueError(f"source must be balanced, got per-class counts {counts}")
    targets = longtailed_counts(counts[0], source.num_classes, imbalance_factor)
    rng = np.random.default_rng(seed)
    keep = []
    for c, n in enumerate(targets):
        idx = np.flatnonzero(source.labels == c)
        keep.append(np.sort(rng.choice(idx, size=n, replace=False)))
    return source.subset(np.concatenate(keep))


def make_synthetic_source(
    num_classes: int,
    per_class: int,
    image_shape: tuple[int, int, int] = (8, 8, 3),
    class_separation: float = 1.0,
    seed: int = 0,
    noise: float = 0.25,
) -> Dataset:
    """Procedural balanced dataset: one smooth colour/texture template per class.

    Each class template is a per-channel mean colour plus a low-frequency
    sinusoidal texture; samples add i.i.d. Gaussian pixel noise and are
    clipped to [0, 1]. ``class_separation`` scales template contrast.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if class_separation <= 0:
        raise ValueError("class_separation must be positive")
    w, h, c = image_shape
    if w < 1 or h < 1 or c < 1:
        raise ValueError(f"zero-sized image shape {image_shape}")
    template_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)
    )
    xs = np.linspace(0.0, 1.0, w)[:, None, None]
    ys = np.linspace(0.0, 1.0, h)[None, :, None]
    templates = np.empty((num_classes, w, h, c))
    for k in range(num_classes):
        colour = template_rng.uniform(-1.0, 1.0, size=c)
        fx, fy = template_rng.uniform(0.5, 2.0, size=2)
        phase = template_rng.uniform(0.0, 2 * np.pi, size=c)
        texture = np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
        templates[k] = 0.5 * colour + 0.5 * texture
    images = 0.5 + 0.25 * class_separation * templates
    labels = np.repeat(np.arange(num_classes), per_class)
    pixels = images[labels] + noise * noise_rng.standard_normal((len(labels), w, h, c))
    return Dataset(np.clip(pixels, 0.0, 1.0), labels, num_classes)


def split_per_class(dataset: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    """Split off the first ``n_first`` samples of every class (e.g. a validation set)."""
    first, rest = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) <= n_first:
            raise ValueError(f"class {c} has only {len(idx)} samples")
        first.append(idx[:n_first])
        rest.append(idx[n_first:])
    return dataset.subset(np.concatenate(first)), dataset.subset(np.concatenate(rest))


def save_dataset(dataset: Dataset, path) -> None:
    n = len(dataset)
    w, h, c = dataset.image_shape
    records = np.empty(n, dtype=_record_dtype(w, h, c))
    records["label"] = dataset.labels
    records["pixels"] = dataset.images.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, n, w, h, c, dataset.num_classes))
        f.write(records.tobytes())


def _record_dtype(w, h, c):
    return np.dtype([("label", "<u4"), ("pixels", "<f4", (w * h * c,))])


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, n, w, h, c, num_classes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    record = _record_dtype(w, h, c)
    body = raw[_HEADER.size:]
    if len(body) != n * record.itemsize:
        raise ValueError(f"{path}: expected {n} records, got {len(body)} bytes of payload")
    records = np.frombuffer(body, dtype=record, count=n)
    images = records["pixels"].reshape(n, w, h, c)
    return Dataset(images, records["label"].astype(np.int64), num_classes)


class SamplerKind(enum.Enum):
    RANDOM = "random"
    BALANCED = "balanced"
    REVERSED = "reversed"


def class_probabilities(kind: SamplerKind, census: ClassCensus) -> np.ndarray:
    counts = census.as_array().astype(np.float64)
    if kind is SamplerKind.RANDOM:
        weights = counts
    elif kind is SamplerKind.BALANCED:
        weights = np.ones_like(counts)
    elif kind is SamplerKind.REVERSED:
        weights = 1.0 / counts
    else:
        raise ValueError(kind)
    return weights / weights.sum()


class ClassSampler:
    """Draws sample indices: first a class from the sampler's class law, then
    a uniform member of that class. Owns its generator; not thread-safe."""

    def __init__(self, kind: SamplerKind | str, labels, num_classes: int, rng):
        self.kind = SamplerKind(kind)
        labels = np.asarray(labels)
        if len(labels) == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.members = [np.flatnonzero(labels == c) for c in range(num_classes)]
        census = ClassCensus(tuple(len(m) for m in self.members))
        self.probs = class_probabilities(self.kind, census)
        self.rng = rng

    def next_index(self) -> int:
        return int(self.draw(1)[0])

    def draw(self, n: int) -> np.ndarray:
        classes = self.rng.choice(len(self.probs), size=n, p=self.probs)
        picks = self.rng.random(n)
        return np.array(
            [self.members[c][int(u * len(self.members[c]))] for c, u in zip(classes, picks)],
            dtype=np.int64,
        )
