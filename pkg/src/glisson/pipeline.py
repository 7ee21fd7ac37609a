"""Per-image processing chain: despeckle, select the mode's raster, extract the
line and compute features; plus model-input assembly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureVector, compute_features
from .imaging import (GradientField, ParameterError, SradParams, enhance_contrast,
                      extract_roi, prewitt_gradient, resize, srad_despeckle)
from .line import LinePath, TrackParams, extract_line, line_to_binary
from .nn.model import FULL_INPUT, ROI_INPUT

IMAGE_MODES = ("full", "roi")


@dataclass(frozen=True)
class PipelineConfig:
    """Image-processing parameters shared by every element.

    ``roi_band`` gives the ROI row band as fractions of the image height; the
    default keeps every row, which suits rasters that are already ROI-sized.
    """

    srad: SradParams = field(default_factory=SradParams)
    track: TrackParams = field(default_factory=TrackParams)
    low_percentile: float = 1.0
    high_percentile: float = 99.0
    roi_band: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        top, bottom = self.roi_band
        if not 0.0 <= top < bottom <= 1.0:
            raise ParameterError(f"roi_band fractions must satisfy 0 <= top < bottom <= 1, got {self.roi_band}")
        if not (0.0 <= self.low_percentile < 50.0 < self.high_percentile <= 100.0):
            raise ParameterError("percentiles must satisfy 0 <= low < 50 < high <= 100")

    def band_rows(self, height: int) -> tuple[int, int]:
        top = int(round(self.roi_band[0] * height))
        bottom = max(int(round(self.roi_band[1] * height)), top + 1)
        return top, bottom


@dataclass(frozen=True)
class Extraction:
    enhanced: np.ndarray
    grad: GradientField
    path: LinePath
    degenerate: bool

    @property
    def line_raster(self) -> np.ndarray:
        h, w = self.enhanced.shape
        return line_to_binary(self.path, w, h)


def check_mode(mode: str) -> str:
    if mode not in IMAGE_MODES:
        raise ParameterError(f"image mode must be one of {IMAGE_MODES}, got {mode!r}")
    return mode


def despeckle(img, cfg: PipelineConfig | None = None) -> np.ndarray:
    return srad_despeckle(img, (cfg or PipelineConfig()).srad)


def mode_image(img, mode: str, cfg: PipelineConfig | None = None) -> np.ndarray:
    """The whole raster (``full``) or its ROI band resized to 310x90 (``roi``)."""
    cfg = cfg or PipelineConfig()
    if check_mode(mode) == "full":
        return np.asarray(img, dtype=np.float64)
    top, bottom = cfg.band_rows(np.shape(img)[0])
    return extract_roi(img, top, bottom)


def extract(img, cfg: PipelineConfig | None = None) -> Extraction:
    """Contrast stretch, Prewitt gradient and line tracking on one raster."""
    cfg = cfg or PipelineConfig()
    enhanced, degenerate = enhance_contrast(img, cfg.low_percentile, cfg.high_percentile)
    grad = prewitt_gradient(enhanced)
    return Extraction(enhanced, grad, extract_line(grad, cfg.track), degenerate)


def features_of(ex: Extraction, cfg: PipelineConfig | None = None) -> FeatureVector:
    cfg = cfg or PipelineConfig()
    return compute_features(ex.enhanced, ex.grad, ex.path, ridge_offset=cfg.track.ridge_offset)


def process_image(img, mode: str = "full", cfg: PipelineConfig | None = None,
                  despeckled: bool = False) -> tuple[Extraction, FeatureVector]:
    """Whole chain for one raw image (skip SRAD with ``despeckled=True``)."""
    cfg = cfg or PipelineConfig()
    base = img if despeckled else despeckle(img, cfg)
    ex = extract(mode_image(base, mode, cfg), cfg)
    return ex, features_of(ex, cfg)


def input_size(mode: str) -> tuple[int, int]:
    """Network input ``(height, width)`` for an image mode."""
    return ROI_INPUT if check_mode(mode) == "roi" else FULL_INPUT


def image_channels(enhanced, line_raster=None, mode: str = "roi") -> np.ndarray:
    """Stack the network image input as ``(channels, height, width)``.

    The line raster, when given, becomes a second channel after the same
    bilinear resize as the image.
    """
    h, w = input_size(mode)
    chans = [resize(enhanced, w, h)]
    if line_raster is not None:
        chans.append(resize(line_raster, w, h))
    return np.stack(chans)
