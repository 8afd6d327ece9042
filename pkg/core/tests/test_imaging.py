import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from core.services.imaging import tile_grid, write_ppm_grid


class SampleGridTests(SimpleTestCase):
    def test_sixteen_32x32_samples(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_ppm_grid(np.zeros((16, 3, 32, 32)), 4, Path(tmp) / "grid.ppm", png=True)
            data = path.read_bytes()
            self.assertTrue(path.with_suffix(".png").exists())
        header = b"P6\n128 128\n255\n"
        self.assertTrue(data.startswith(header))
        pixels = data[len(header):]
        self.assertEqual(len(pixels), 128 * 128 * 3)
        self.assertEqual(set(pixels), {128})

    def test_partial_last_row_is_black(self):
        images = np.ones((3, 3, 2, 2))
        canvas = tile_grid(images, 2)
        self.assertEqual(canvas.shape, (4, 4, 3))
        self.assertTrue(np.all(canvas[:2] == 255))
        self.assertTrue(np.all(canvas[2:, :2] == 255))
        self.assertTrue(np.all(canvas[2:, 2:] == 0))

    def test_channel_layout(self):
        images = np.full((1, 3, 1, 1), -1.0)
        images[0, 2] = 1.0
        np.testing.assert_array_equal(tile_grid(images, 1)[0, 0], [0, 0, 255])

    def test_bad_shape(self):
        with self.assertRaises(ValidationError):
            tile_grid(np.zeros((2, 1, 4, 4)), 2)
