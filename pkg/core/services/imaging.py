from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from PIL import Image

from core.services.data import denormalize_pixels

logger = logging.getLogger(__name__)


def tile_grid(images: np.ndarray, columns: int) -> np.ndarray:
    """[n, 3, h, w] in [-1, 1] -> uint8 [rows*h, columns*w, 3]; empty cells stay black."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValidationError("Expected images [n, 3, h, w], got %(s)s.", code="shape_mismatch", params={"s": list(images.shape)})
    if columns < 1:
        raise ValidationError("Grid needs at least one column.", code="bad_value")
    n, _, h, w = images.shape
    rows = max(1, math.ceil(n / columns))
    canvas = np.zeros((rows * h, columns * w, 3), dtype=np.uint8)
    pixels = denormalize_pixels(images).transpose(0, 2, 3, 1)
    for i in range(n):
        r, c = divmod(i, columns)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = pixels[i]
    return canvas


def write_ppm_grid(images: np.ndarray, columns: int, path, png: bool = False) -> Path:
    """Binary PPM (P6, maxval 255); with png=True a .png copy is written next to it."""
    path = Path(path)
    canvas = tile_grid(images, columns)
    image = Image.fromarray(canvas)
    try:
        image.save(path, format="PPM")
        if png:
            image.save(path.with_suffix(".png"), format="PNG")
    except OSError as exc:
        raise ValidationError("Cannot write %(p)s: %(e)s", code="bad_value", params={"p": str(path), "e": exc}) from exc
    logger.info("sample grid written path=%s size=%sx%s", path, canvas.shape[1], canvas.shape[0])
    return path
