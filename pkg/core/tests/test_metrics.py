import math
import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from core.services.data import synth_dataset
from core.services.metrics import (
    ClassPosterior,
    FileExtractor,
    GaussianStats,
    PixelMomentsExtractor,
    RandomConvExtractor,
    build_extractor,
    evaluate,
    frechet_distance,
    gaussian_stats,
    inception_score,
    sqrtm_psd,
    write_matrix_csv,
)


class GaussianStatsTests(SimpleTestCase):
    def test_two_rows(self):
        stats = gaussian_stats([[1.0, 0.0], [3.0, 2.0]])
        np.testing.assert_array_equal(stats.mean, [2.0, 1.0])
        np.testing.assert_array_equal(stats.cov, [[2.0, 2.0], [2.0, 2.0]])

    def test_identical_rows(self):
        stats = gaussian_stats(np.ones((5, 3)))
        np.testing.assert_array_equal(stats.cov, np.zeros((3, 3)))

    def test_single_row(self):
        with self.assertRaises(ValidationError) as ctx:
            gaussian_stats([[1.0, 2.0]])
        self.assertEqual(ctx.exception.code, "too_few_samples")


class SqrtmTests(SimpleTestCase):
    def test_diagonal(self):
        np.testing.assert_allclose(sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)

    def test_zero(self):
        np.testing.assert_array_equal(sqrtm_psd(np.zeros((3, 3))), np.zeros((3, 3)))

    def test_random_psd(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            b = rng.normal(size=(6, 6))
            a = b @ b.T
            root = sqrtm_psd(a)
            np.testing.assert_allclose(root @ root, a, atol=1e-9)
            self.assertGreaterEqual(np.linalg.eigvalsh(root).min(), -1e-9)

    def test_indefinite(self):
        with self.assertRaises(ValidationError) as ctx:
            sqrtm_psd(np.diag([1.0, -1.0]))
        self.assertEqual(ctx.exception.code, "indefinite")


class FrechetDistanceTests(SimpleTestCase):
    def test_mean_shift(self):
        p = GaussianStats(np.zeros(2), np.eye(2), 10)
        q = GaussianStats(np.array([3.0, 0.0]), np.eye(2), 10)
        self.assertAlmostEqual(frechet_distance(p, q), 9.0, places=12)

    def test_scaled_covariance(self):
        p = GaussianStats(np.zeros(2), np.eye(2), 10)
        q = GaussianStats(np.zeros(2), 4.0 * np.eye(2), 10)
        self.assertAlmostEqual(frechet_distance(p, q), 2.0, places=12)

    def test_symmetric_and_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            d = int(rng.integers(1, 17))
            a = gaussian_stats(rng.normal(size=(d + 8, d)) * rng.uniform(0.1, 3.0))
            b = gaussian_stats(rng.normal(size=(d + 8, d)) + rng.normal(size=d))
            d_ab, d_ba = frechet_distance(a, b), frechet_distance(b, a)
            self.assertGreaterEqual(d_ab, -1e-9)
            self.assertAlmostEqual(d_ab, d_ba, delta=1e-8 * max(1.0, abs(d_ab)))

    def test_self_distance(self):
        rng = np.random.default_rng(2)
        stats = gaussian_stats(rng.normal(size=(50, 8)))
        self.assertLess(abs(frechet_distance(stats, stats)), 1e-9)

    def test_dimension_mismatch(self):
        with self.assertRaises(ValidationError) as ctx:
            frechet_distance(GaussianStats(np.zeros(2), np.eye(2), 2), GaussianStats(np.zeros(3), np.eye(3), 2))
        self.assertEqual(ctx.exception.code, "dim_mismatch")


class InceptionScoreTests(SimpleTestCase):
    def test_identical_rows_score_one(self):
        self.assertAlmostEqual(inception_score(ClassPosterior(np.tile([0.2, 0.3, 0.5], (4, 1)))), 1.0, places=12)

    def test_confident_and_diverse(self):
        self.assertAlmostEqual(inception_score(ClassPosterior(np.eye(3))), 3.0, places=12)

    def test_known_value(self):
        probs = np.array([[0.9, 0.1], [0.1, 0.9]])
        expected = math.exp(0.9 * math.log(1.8) + 0.1 * math.log(0.2))
        self.assertAlmostEqual(inception_score(ClassPosterior(probs)), expected, places=12)
        self.assertAlmostEqual(inception_score(ClassPosterior(probs)), 1.4450, places=4)

    def test_malformed(self):
        for probs in ([[0.5, 0.6]], [[1.2, -0.2]], [0.5, 0.5]):
            with self.subTest(probs=probs), self.assertRaises(ValidationError) as ctx:
                ClassPosterior(np.array(probs))
            self.assertEqual(ctx.exception.code, "malformed_posterior")


class _PassThrough:
    """Generator stand-in that replays dataset images."""

    def __init__(self, images):
        self.images = images

    def sample(self, n, seed, purpose=None):
        return self.images[:n]


class ExtractorTests(SimpleTestCase):
    def setUp(self):
        self.dataset = synth_dataset("blobs", 8, 4, 256, seed=0)

    def test_pass_through_generator_scores_zero(self):
        extractor = RandomConvExtractor(seed=0, feature_dim=16, num_classes=4)
        images = self.dataset.head(256)
        result = evaluate(_PassThrough(images), extractor, extractor.features(images), 256, seed=0)
        self.assertLess(abs(result.fid), 1e-6)
        self.assertGreaterEqual(result.inception_score, 1.0)
        self.assertEqual(result.fake_features.shape, (256, 16))

    def test_features_are_deterministic(self):
        images = self.dataset.head(32)
        a = RandomConvExtractor(seed=3, feature_dim=8).features(images)
        b = RandomConvExtractor(seed=3, feature_dim=8).features(images)
        np.testing.assert_array_equal(a, b)

    def test_saved_weights_reproduce_features(self):
        images = self.dataset.head(16)
        extractor = RandomConvExtractor(seed=4, feature_dim=8, num_classes=4, resolution=8)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "extractor.bin"
            extractor.save(path)
            loaded = build_extractor("file", path=path)
        self.assertIsInstance(loaded, FileExtractor)
        np.testing.assert_array_equal(loaded.features(images), extractor.features(images))
        with self.assertRaises(ValidationError) as ctx:
            loaded.features(np.zeros((2, 3, 16, 16)))
        self.assertEqual(ctx.exception.code, "resolution_mismatch")

    def test_pixel_moments(self):
        extractor = PixelMomentsExtractor(num_classes=4)
        features = extractor.features(self.dataset.head(10))
        self.assertEqual(features.shape, (10, 54))
        self.assertEqual(extractor.posteriors(features=features).num_classes, 4)

    def test_unknown_extractor(self):
        with self.assertRaises(ValidationError) as ctx:
            build_extractor("inception")
        self.assertEqual(ctx.exception.code, "bad_value")

    def test_matrix_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_matrix_csv(Path(tmp) / "m.csv", [[0.1, 2.0], [3.5, -1.0]])
            self.assertEqual(path.read_text(encoding="utf-8").splitlines(), ["0.1,2.0", "3.5,-1.0"])
