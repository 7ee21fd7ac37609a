"""8-bit grayscale image files (binary PGM and PNG)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class DataError(RuntimeError):
    """An input file is missing, unreadable or malformed."""


def quantize(img) -> np.ndarray:
    """Map [0, 1] intensities to uint8 with round-half-up."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                raise DataError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim != 2 or min(arr.shape) < 3:
        raise DataError(f"{path}: image must be 2-D and at least 3x3, got {arr.shape}")
    return arr / 255.0


def write_image(img, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".pgm", ".png"):
        raise ValueError(f"unsupported image format {suffix!r}; use .pgm or .png")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(img)).save(path, format="PPM" if suffix == ".pgm" else "PNG")
