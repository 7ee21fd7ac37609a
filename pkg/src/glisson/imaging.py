"""Raster kernels applied before line extraction.

Images are plain 2-D ``float64`` numpy arrays of shape ``(height, width)``
with intensities in ``[0, 1]``.  Every kernel here is a pure function: the
input array is never modified.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROI_WIDTH = 310
ROI_HEIGHT = 90

PREWITT_X = np.array([[-1.0, 0.0, 1.0],
                      [-1.0, 0.0, 1.0],
                      [-1.0, 0.0, 1.0]])
PREWITT_Y = PREWITT_X.T.copy()


class ParameterError(ValueError):
    """Raised when an operation receives parameters outside its contract."""


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate a grayscale raster and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    if h < 3 or w < 3:
        raise ParameterError(f"{name} must be at least 3x3, got {w}x{h}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError(f"{name} intensities must lie in [0, 1]")
    return arr


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray

    @property
    def shape(self):
        return self.magnitude.shape


@dataclass(frozen=True)
class SradParams:
    """SRAD iteration controls.

    ``q0`` is the initial speckle-scale threshold; it decays as
    ``q0 * exp(-rho * t)`` where ``t = iteration * time_step``.
    """

    iterations: int = 100
    time_step: float = 0.2
    q0: float = 0.2
    rho: float = 1.0 / 6.0

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ParameterError(f"iterations must be a positive integer, got {self.iterations}")
        if not 0.0 < self.time_step <= 0.25:
            raise ParameterError(f"time_step must lie in (0, 0.25], got {self.time_step}")
        if self.q0 <= 0.0:
            raise ParameterError(f"q0 must be positive, got {self.q0}")
        if self.rho <= 0.0:
            raise ParameterError(f"rho must be positive, got {self.rho}")


def _neighbour_diffs(img: np.ndarray):
    """North/south/west/east differences with replicate padding."""
    p = np.pad(img, 1, mode="edge")
    centre = p[1:-1, 1:-1]
    d_n = p[:-2, 1:-1] - centre
    d_s = p[2:, 1:-1] - centre
    d_w = p[1:-1, :-2] - centre
    d_e = p[1:-1, 2:] - centre
    return d_n, d_s, d_w, d_e


def srad_despeckle(img, params: SradParams | None = None) -> np.ndarray:
    """Speckle reducing anisotropic diffusion (explicit 4-neighbour scheme).

    Each step estimates the instantaneous coefficient of variation ``q`` per
    pixel, maps it to a diffusion coefficient in ``[0, 1]`` against the
    decaying threshold, and applies ``I += time_step * div(c * grad I)``.
    """
    params = params or SradParams()
    out = check_image(img).copy()
    if not np.any(out):
        return out
    eps = 1e-12
    for n in range(params.iterations):
        q0_sq = (params.q0 * np.exp(-params.rho * n * params.time_step)) ** 2
        d_n, d_s, d_w, d_e = _neighbour_diffs(out)
        denom = np.maximum(out, eps)
        grad_sq = (d_n ** 2 + d_s ** 2 + d_w ** 2 + d_e ** 2) / denom ** 2
        lap = (d_n + d_s + d_w + d_e) / denom
        q_sq = (0.5 * grad_sq - lap ** 2 / 16.0) / (1.0 + 0.25 * lap) ** 2
        c = 1.0 / (1.0 + (q_sq - q0_sq) / (q0_sq * (1.0 + q0_sq)))
        c = np.clip(np.nan_to_num(c, nan=0.0, posinf=1.0, neginf=0.0), 0.0, 1.0)
        # each link conducts with the mean coefficient of its two endpoints
        cp = np.pad(c, 1, mode="edge")
        c_n = 0.5 * (c + cp[:-2, 1:-1])
        c_s = 0.5 * (c + cp[2:, 1:-1])
        c_w = 0.5 * (c + cp[1:-1, :-2])
        c_e = 0.5 * (c + cp[1:-1, 2:])
        div = c_n * d_n + c_s * d_s + c_w * d_w + c_e * d_e
        out = out + params.time_step * div
    return np.clip(out, 0.0, 1.0)


def _correlate3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 correlation with replicate padding.

    Positive and negative taps are accumulated separately (row-major order)
    and subtracted last, so mirrored kernels give exact zeros on flat input.
    """
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    pos = np.zeros((h, w))
    neg = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            k = kernel[i, j]
            if k > 0:
                pos += k * p[i:i + h, j:j + w]
            elif k < 0:
                neg += -k * p[i:i + h, j:j + w]
    return pos - neg


def prewitt_gradient(img) -> GradientField:
    """Prewitt derivatives with replicate padding.

    ``gx`` is positive where intensity increases to the right, ``gy`` where it
    increases downward (towards larger row index).
    """
    arr = check_image(img)
    gx = _correlate3(arr, PREWITT_X)
    gy = _correlate3(arr, PREWITT_Y)
    return GradientField(gx=gx, gy=gy, magnitude=np.hypot(gx, gy))


def enhance_contrast(img, low_percentile: float = 1.0,
                     high_percentile: float = 99.0) -> tuple[np.ndarray, bool]:
    """Linear percentile stretch.

    Returns ``(image, degenerate)``; when both percentiles coincide the input
    is returned unchanged with ``degenerate=True``.
    """
    if not (0.0 <= low_percentile < 50.0 and 50.0 < high_percentile <= 100.0):
        raise ParameterError(
            f"percentiles must satisfy 0 <= low < 50 < high <= 100, got {low_percentile}, {high_percentile}")
    arr = check_image(img)
    lo, hi = np.percentile(arr, [low_percentile, high_percentile])
    if hi <= lo:
        return arr.copy(), True
    return np.clip((arr - lo) / (hi - lo), 0.0, 1.0), False


def bilinear_sample(img: np.ndarray, rows, cols) -> np.ndarray:
    """Sample ``img`` at fractional coordinates, replicating the border."""
    h, w = img.shape
    rows = np.clip(np.asarray(rows, dtype=np.float64), 0.0, h - 1)
    cols = np.clip(np.asarray(cols, dtype=np.float64), 0.0, w - 1)
    r0 = np.minimum(np.floor(rows).astype(np.intp), h - 2)
    c0 = np.minimum(np.floor(cols).astype(np.intp), w - 2)
    fr = rows - r0
    fc = cols - c0
    top = img[r0, c0] * (1.0 - fc) + img[r0, c0 + 1] * fc
    bottom = img[r0 + 1, c0] * (1.0 - fc) + img[r0 + 1, c0 + 1] * fc
    return top * (1.0 - fr) + bottom * fr


def resize(img, new_width: int, new_height: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment.

    Any positive target size is accepted; the source needs at least 2x2.
    """
    if new_width < 1 or new_height < 1:
        raise ParameterError(f"target size must be positive, got {new_width}x{new_height}")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) < 2:
        raise ParameterError(f"resize needs a 2-D source of at least 2x2, got {arr.shape}")
    h, w = arr.shape
    if (h, w) == (new_height, new_width):
        return arr.copy()
    rows = (np.arange(new_height) + 0.5) * (h / new_height) - 0.5
    cols = (np.arange(new_width) + 0.5) * (w / new_width) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.clip(bilinear_sample(arr, rr, cc), 0.0, 1.0)


def extract_roi(img, band_top: int, band_bottom: int,
                width: int = ROI_WIDTH, height: int = ROI_HEIGHT) -> np.ndarray:
    """Crop the row band ``[band_top, band_bottom)`` and resize it to the ROI size."""
    arr = check_image(img)
    if not 0 <= band_top < band_bottom <= arr.shape[0]:
        raise ParameterError(
            f"band [{band_top}, {band_bottom}) invalid for image height {arr.shape[0]}")
    crop = arr[band_top:band_bottom]
    if crop.shape[0] < 2:
        # bilinear sampling needs two rows; a single-row band is replicated
        crop = np.repeat(crop, 2, axis=0)
    return resize(crop, width, height)


def speckle_index(img) -> float:
    """Ratio of standard deviation to mean over the whole raster."""
    arr = np.asarray(img, dtype=np.float64)
    return float(arr.std() / arr.mean())
