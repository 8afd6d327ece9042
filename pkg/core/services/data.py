from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from django.core.exceptions import ValidationError

from core.services import tensor as T
from core.services.tensor import Tensor

logger = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

SYNTH_KINDS = ("rings", "blobs", "stripes")
SYNTH_RESOLUTIONS = (8, 16, 32)

# Counter word 1 of every Philox stream: what the draw is for.
PURPOSE_LATENT = 1
PURPOSE_LABEL = 2
PURPOSE_SHUFFLE = 3
PURPOSE_SAMPLE = 4
PURPOSE_EVAL = 5
PURPOSE_SYNTH = 6
PURPOSE_EXTRACTOR = 7


# -------------------------
# Counter-based randomness
# -------------------------

def stream(seed: int, purpose: int, iteration: int = 0, substep: int = 0) -> np.random.Generator:
    """
    Philox generator keyed by the run seed; (purpose, iteration, substep) fill
    the upper counter words. Resuming at any iteration needs no saved RNG state.
    """
    key = int(seed) % (1 << 128)
    counter = (int(purpose) << 64) | (int(iteration) << 128) | (int(substep) << 192)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def sample_latent(batch: int, z_dim: int, rng: np.random.Generator) -> Tensor:
    """Standard normal [batch, z_dim] by Box-Muller over the generator's uniforms."""
    n = int(batch) * int(z_dim)
    pairs = (n + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 in (0, 1]
    theta = 2.0 * np.pi * u2
    z = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).reshape(-1)[:n]
    return Tensor(z.reshape(batch, z_dim))


def sample_labels(batch: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, num_classes, size=batch)


# -------------------------
# Pixels
# -------------------------

def normalize_pixels(raw: np.ndarray) -> np.ndarray:
    """uint8 bytes -> [-1, 1]; 0 -> -1.0 and 255 -> +1.0 exactly."""
    return (np.asarray(raw, dtype=np.float64) / 127.5 - 1.0).astype(T.get_default_dtype())


def denormalize_pixels(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> uint8, rounding half away from zero (0.0 -> 128)."""
    v = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


# -------------------------
# Datasets
# -------------------------

@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # [3, h, w] in [-1, 1]
    label: int


class DatasetHandle:
    """In-memory uint8 images [n, 3, r, r] with class labels; indexed access is pure."""

    def __init__(self, name: str, images: np.ndarray, labels: np.ndarray, num_classes: int):
        images = np.ascontiguousarray(images, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3]:
            raise ValidationError("Dataset images must be [n, 3, r, r], got %(s)s.", code="invalid_spec", params={"s": list(images.shape)})
        if len(labels) != len(images):
            raise ValidationError("Got %(a)s images and %(b)s labels.", code="invalid_spec", params={"a": len(images), "b": len(labels)})
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValidationError("Labels must lie in [0, %(k)s).", code="label_range", params={"k": num_classes})
        images.setflags(write=False)
        labels.setflags(write=False)
        self.name = name
        self.images = images
        self.labels = labels
        self.num_classes = int(num_classes)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[2])

    def __getitem__(self, idx: int) -> LabeledImage:
        return LabeledImage(normalize_pixels(self.images[idx]), int(self.labels[idx]))

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        return normalize_pixels(self.images[indices]), self.labels[indices].copy()

    def head(self, n: int) -> np.ndarray:
        return normalize_pixels(self.images[: min(n, len(self))])

    def __repr__(self):
        return f"DatasetHandle({self.name!r}, n={len(self)}, resolution={self.resolution}, K={self.num_classes})"


def read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise ValidationError(
            "%(path)s: %(size)s bytes is not a whole number of %(rec)s-byte records.",
            code="file_size",
            params={"path": str(path), "size": raw.size, "rec": CIFAR_RECORD},
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise ValidationError(
            "%(path)s: label byte %(label)s is out of range.",
            code="label_range",
            params={"path": str(path), "label": int(labels.max())},
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, split: str = "train") -> DatasetHandle:
    """Read the standard binary batches: 1 label byte then 1024 R, 1024 G, 1024 B bytes."""
    directory = Path(directory)
    if split not in ("train", "test"):
        raise ValidationError("Unknown split %(s)s.", code="bad_value", params={"s": split})
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    paths = [directory / name for name in names if (directory / name).exists()]
    if not paths:
        raise ValidationError(
            "No CIFAR-10 %(split)s batches found in %(dir)s.",
            code="bad_value",
            params={"split": split, "dir": str(directory)},
        )
    parts = [read_cifar_file(p) for p in paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    handle = DatasetHandle(f"cifar10-{split}", images, labels, CIFAR_CLASSES)
    logger.info("dataset loaded name=%s n=%s resolution=%s K=%s", handle.name, len(handle), handle.resolution, handle.num_classes)
    return handle


def _class_colors(num_classes: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(k / num_classes, 0.85, 1.0) for k in range(num_classes)])


def synth_dataset(kind: str, resolution: int, num_classes: int, n: int, seed: int) -> DatasetHandle:
    """
    Procedural class-dependent patterns with per-sample jitter:

    - blobs: a Gaussian spot whose position and color depend on the class
    - rings: a ring whose radius and color depend on the class
    - stripes: a grating whose orientation and color depend on the class
    """
    if kind not in SYNTH_KINDS:
        raise ValidationError("Unknown synthetic kind %(k)s.", code="bad_value", params={"k": kind})
    if resolution not in SYNTH_RESOLUTIONS:
        raise ValidationError(
            "Synthetic data supports resolutions %(choices)s, got %(r)s.",
            code="unsupported_resolution",
            params={"r": resolution, "choices": ", ".join(str(r) for r in SYNTH_RESOLUTIONS)},
        )
    if num_classes < 1 or n < 1:
        raise ValidationError("Synthetic data needs K >= 1 and n >= 1.", code="bad_value")

    rng = stream(seed, PURPOSE_SYNTH)
    labels = rng.permutation(np.arange(n) % num_classes)
    jitter = rng.normal(0.0, 0.03, size=(n, 2))
    tint = rng.uniform(-0.1, 0.1, size=(n, 3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)

    coords = (np.arange(resolution) + 0.5) / resolution - 0.5
    v, u = np.meshgrid(coords, coords, indexing="ij")
    u = u[None] - jitter[:, 0, None, None]
    v = v[None] - jitter[:, 1, None, None]
    k = labels[:, None, None].astype(np.float64)

    if kind == "blobs":
        angle = 2.0 * np.pi * k / num_classes
        d2 = (u - 0.25 * np.cos(angle)) ** 2 + (v - 0.25 * np.sin(angle)) ** 2
        intensity = np.exp(-d2 / (2 * 0.12 ** 2))
    elif kind == "rings":
        radius = 0.1 + 0.3 * (k + 0.5) / num_classes
        intensity = np.exp(-((np.sqrt(u ** 2 + v ** 2) - radius) ** 2) / (2 * 0.05 ** 2))
    else:
        theta = np.pi * k / num_classes
        proj = u * np.cos(theta) + v * np.sin(theta)
        intensity = 0.5 + 0.5 * np.cos(2.0 * np.pi * 2.0 * proj + phase[:, None, None])

    color = np.clip(_class_colors(num_classes)[labels] + tint, 0.0, 1.0)
    pixels = intensity[:, None] * color[:, :, None, None] * 2.0 - 1.0
    handle = DatasetHandle(f"synth-{kind}", denormalize_pixels(pixels), labels, num_classes)
    logger.info("dataset loaded name=%s n=%s resolution=%s K=%s seed=%s", handle.name, len(handle), resolution, num_classes, seed)
    return handle


# -------------------------
# Batching
# -------------------------

class BatchSampler:
    """
    Sampling without replacement, reshuffled each epoch by a permutation of
    (seed, epoch). Stateless given the cursor (examples consumed so far), so a
    checkpoint only needs the cursor.
    """

    def __init__(self, dataset: DatasetHandle, seed: int):
        if len(dataset) == 0:
            raise ValidationError("Cannot sample from an empty dataset.", code="too_few_samples")
        self.dataset = dataset
        self.seed = seed
        self._epoch: Optional[int] = None
        self._perm: Optional[np.ndarray] = None

    def permutation(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch:
            self._perm = stream(self.seed, PURPOSE_SHUFFLE, epoch).permutation(len(self.dataset))
            self._epoch = epoch
        return self._perm

    def indices(self, cursor: int, size: int) -> np.ndarray:
        epochs, offsets = np.divmod(np.arange(cursor, cursor + size), len(self.dataset))
        out = np.empty(size, dtype=np.int64)
        for epoch in np.unique(epochs):
            mask = epochs == epoch
            out[mask] = self.permutation(int(epoch))[offsets[mask]]
        return out

    def batch(self, cursor: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Images and labels for examples [cursor, cursor + size); wraps across epochs."""
        return self.dataset.batch(self.indices(cursor, size))
