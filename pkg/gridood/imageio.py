import logging
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a [3,S,S] image with values in [0,1] as binary PPM (P6, maxval 255)."""
    rgb = np.ascontiguousarray(to_uint8(np.transpose(image, (1, 2, 0))))
    Image.fromarray(rgb).save(path, format="PPM")


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Write a [rows, cols] map with values in [0,1] as binary PGM (P5, maxval 255)."""
    Image.fromarray(to_uint8(gray)).save(path, format="PPM")


def read_ppm(path: str | Path) -> np.ndarray:
    """Read an 8-bit colour image into a [3,S,S] float64 array in [0,1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return np.ascontiguousarray(np.transpose(rgb, (2, 0, 1)) / 255.0)
