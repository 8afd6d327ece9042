from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from django.core.exceptions import ValidationError
from scipy import linalg
from scipy.special import softmax
from scipy.stats import entropy

from core.services import tensor as T
from core.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from core.services.data import PURPOSE_EVAL
from core.services.nn import Initializer
from core.services.tensor import Tensor

logger = logging.getLogger(__name__)

EIG_TOLERANCE = 1e-8
# eigenvalues below this (relative) are rounding noise around zero
NOISE_FLOOR = 1e-12
ROW_SUM_TOLERANCE = 1e-9
EXTRACTOR_CHUNK = 256


# -------------------------
# Gaussian fits and FID
# -------------------------

@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased (n - 1) covariance of the rows."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValidationError("Features must be a matrix [n, d], got %(s)s.", code="dim_mismatch", params={"s": list(f.shape)})
    n = f.shape[0]
    if n < 2:
        raise ValidationError("Need at least 2 samples for a covariance, got %(n)s.", code="too_few_samples", params={"n": n})
    mu = f.mean(axis=0)
    centered = f - mu
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mu, (cov + cov.T) / 2.0, n)


def sqrtm_psd(a) -> np.ndarray:
    """Symmetric square root by eigendecomposition; slightly negative eigenvalues are clamped to 0."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("sqrtm needs a square matrix, got %(s)s.", code="dim_mismatch", params={"s": list(a.shape)})
    a = (a + a.T) / 2.0
    w, v = linalg.eigh(a)
    scale = max(1.0, float(np.abs(w).max())) if w.size else 1.0
    if w.size and w.min() < -EIG_TOLERANCE * scale:
        raise ValidationError(
            "Matrix is indefinite (smallest eigenvalue %(w)s).",
            code="indefinite",
            params={"w": float(w.min())},
        )
    w = np.where(w > NOISE_FLOOR * scale, w, 0.0)
    root = (v * np.sqrt(w)) @ v.T
    return (root + root.T) / 2.0


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """
    ||mu_p - mu_q||^2 + tr(C_p + C_q - 2 (C_p C_q)^(1/2)), with the cross term
    taken as tr sqrtm(C_p^(1/2) C_q C_p^(1/2)), which is symmetric PSD.
    """
    if p.dim != q.dim:
        raise ValidationError("Feature dimensions differ: %(a)s vs %(b)s.", code="dim_mismatch", params={"a": p.dim, "b": q.dim})
    root_p = sqrtm_psd(p.cov)
    cross = sqrtm_psd(root_p @ q.cov @ root_p)
    diff = p.mean - q.mean
    return float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross))


# -------------------------
# Inception score
# -------------------------

@dataclass(frozen=True)
class ClassPosterior:
    probs: np.ndarray  # [n, K], rows p(l|x)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] < 1:
            raise ValidationError("Posterior must be a matrix [n, K], got %(s)s.", code="malformed_posterior", params={"s": list(probs.shape)})
        if (probs < 0).any():
            raise ValidationError("Posterior has negative entries.", code="malformed_posterior")
        worst = float(np.abs(probs.sum(axis=1) - 1.0).max())
        if worst > ROW_SUM_TOLERANCE:
            raise ValidationError("Posterior rows must sum to 1 (worst off by %(e)s).", code="malformed_posterior", params={"e": worst})
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        return int(self.probs.shape[1])


def inception_score(post: ClassPosterior) -> float:
    """exp of the mean KL(p(l|x) || p(l)), p(l) the column mean. Single split."""
    if not isinstance(post, ClassPosterior):
        post = ClassPosterior(post)
    marginal = post.probs.mean(axis=0)
    kl = entropy(post.probs, marginal[None, :], axis=1)
    return float(np.exp(kl.mean()))


# -------------------------
# Feature extractors
# -------------------------

class FeatureExtractor:
    """Fixed, non-trainable map images [n, 3, r, r] in [-1, 1] -> features [n, d] and class posteriors."""

    name = "base"
    resolution: Optional[int] = None
    feature_dim = 0
    num_classes = 10

    def _check(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValidationError("Extractor expects [n, 3, r, r] images, got %(s)s.", code="shape_mismatch", params={"s": list(images.shape)})
        if self.resolution is not None and images.shape[2:] != (self.resolution, self.resolution):
            raise ValidationError(
                "%(name)s extractor is fixed to %(r)sx%(r)s images, got %(s)s.",
                code="resolution_mismatch",
                params={"name": self.name, "r": self.resolution, "s": list(images.shape)},
            )
        return images

    def _features(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def features(self, images) -> np.ndarray:
        images = self._check(images)
        chunks = [self._features(images[i:i + EXTRACTOR_CHUNK]) for i in range(0, len(images), EXTRACTOR_CHUNK)]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.feature_dim))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.head

    def posteriors(self, images=None, features=None) -> ClassPosterior:
        if features is None:
            features = self.features(images)
        return ClassPosterior(softmax(self.logits(features), axis=1))


class PixelMomentsExtractor(FeatureExtractor):
    """Per-channel mean and std plus a 4x4 pooled thumbnail (d = 54)."""

    name = "pixel_moments"

    def __init__(self, seed: int = 0, num_classes: int = 10):
        self.feature_dim = 6 + 3 * 16
        self.num_classes = num_classes
        self.head = Initializer(seed, "normal").rng("extractor.head").normal(0.0, 1.0, size=(self.feature_dim, num_classes))

    def _features(self, images):
        n, c, h, w = images.shape
        if h % 4 or w % 4:
            raise ValidationError("Pixel moments need sides divisible by 4.", code="odd_extent")
        thumb = images.reshape(n, c, 4, h // 4, 4, w // 4).mean(axis=(3, 5)).reshape(n, -1)
        return np.concatenate([images.mean(axis=(2, 3)), images.std(axis=(2, 3)), thumb], axis=1)


class RandomConvExtractor(FeatureExtractor):
    """
    Fixed-seed random CNN: 3x3 conv -> ReLU -> avgpool -> 3x3 conv -> ReLU ->
    global mean (d = feature_dim), with a random linear head for IS posteriors.
    """

    name = "random_conv"
    hidden = 32

    def __init__(self, seed: int = 0, feature_dim: int = 64, num_classes: int = 10, resolution: Optional[int] = None, weights=None):
        self.seed = seed
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.resolution = resolution
        if weights is None:
            init = Initializer(seed, "glorot")
            weights = OrderedDict(
                [
                    ("extractor.conv1.kernel", init.weight("extractor.conv1.kernel", (self.hidden, 3, 3, 3), 27, self.hidden * 9) * 2.0),
                    ("extractor.conv2.kernel", init.weight("extractor.conv2.kernel", (feature_dim, self.hidden, 3, 3), self.hidden * 9, feature_dim * 9) * 2.0),
                    ("extractor.head", init.weight("extractor.head", (feature_dim, num_classes), feature_dim, num_classes) * 4.0),
                ]
            )
        self.weights = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in weights.items())
        self.head = self.weights["extractor.head"]

    def _features(self, images):
        with T.no_tape():
            h = T.relu(T.conv2d(Tensor(images, dtype=np.float64), Tensor(self.weights["extractor.conv1.kernel"], dtype=np.float64)))
            if h.shape[2] % 2 == 0 and h.shape[2] > 4:
                h = T.avgpool2x(h)
            h = T.relu(T.conv2d(h, Tensor(self.weights["extractor.conv2.kernel"], dtype=np.float64)))
        return h.data.mean(axis=(2, 3))

    def to_checkpoint(self) -> Checkpoint:
        config = OrderedDict(
            kind=self.name,
            seed=str(self.seed),
            feature_dim=str(self.feature_dim),
            num_classes=str(self.num_classes),
            resolution=str(self.resolution or 0),
        )
        return Checkpoint(config=config, tensors=OrderedDict(self.weights))

    def save(self, path) -> int:
        return save_checkpoint(path, self.to_checkpoint())


class FileExtractor(RandomConvExtractor):
    """Random-conv architecture with weights read from a checkpoint-format file."""

    name = "file"

    def __init__(self, path):
        ckpt = load_checkpoint(path)
        if ckpt.get("kind") not in (RandomConvExtractor.name, FileExtractor.name):
            raise ValidationError("%(path)s does not hold extractor weights.", code="invalid_spec", params={"path": str(path)})
        self.path = Path(path)
        super().__init__(
            seed=int(ckpt.get("seed", 0)),
            feature_dim=int(ckpt.get("feature_dim")),
            num_classes=int(ckpt.get("num_classes")),
            resolution=int(ckpt.get("resolution", 0)) or None,
            weights=OrderedDict((k, ckpt.tensor(k)) for k in ("extractor.conv1.kernel", "extractor.conv2.kernel", "extractor.head")),
        )


EXTRACTORS = ("random_conv", "pixel_moments", "file")


def build_extractor(kind: str = "random_conv", *, seed: int = 0, feature_dim: int = 64, num_classes: int = 10, path=None) -> FeatureExtractor:
    if kind == "random_conv":
        return RandomConvExtractor(seed=seed, feature_dim=feature_dim, num_classes=num_classes)
    if kind == "pixel_moments":
        return PixelMomentsExtractor(seed=seed, num_classes=num_classes)
    if kind == "file":
        if not path:
            raise ValidationError("extractor=file needs extractor_path.", code="bad_value")
        return FileExtractor(path)
    raise ValidationError("Unknown extractor %(k)s (choose from %(choices)s).", code="bad_value", params={"k": kind, "choices": ", ".join(EXTRACTORS)})


# -------------------------
# Evaluation
# -------------------------

@dataclass
class EvalResult:
    fid: float
    inception_score: float
    fake_features: np.ndarray
    posteriors: ClassPosterior


def evaluate(generator, extractor: FeatureExtractor, real_features, n_samples: int, seed: int, purpose: int = PURPOSE_EVAL) -> EvalResult:
    """
    Draw n_samples images from generator.sample(n, seed, purpose=...) and score
    them against real_features (a feature matrix or its GaussianStats).
    """
    real = real_features if isinstance(real_features, GaussianStats) else gaussian_stats(real_features)
    images = generator.sample(n_samples, seed, purpose=purpose)
    fake_features = extractor.features(images)
    if fake_features.shape[1] != real.dim:
        raise ValidationError("Extractor output does not match the real features.", code="dim_mismatch")
    fid = frechet_distance(real, gaussian_stats(fake_features))
    post = extractor.posteriors(features=fake_features)
    score = inception_score(post)
    logger.info("evaluation n=%s fid=%.6f is=%.6f extractor=%s", n_samples, fid, score, extractor.name)
    return EvalResult(fid, score, fake_features, post)


def write_matrix_csv(path, matrix) -> Path:
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])
    return path
