"""The five scalar line features and their z-score normalisation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import GradientField, ParameterError
from .line import LinePath, TrackParams, ridge_response

FEATURE_NAMES = ("grad_mean", "grad_var", "continuity", "length", "contrast")
BACKGROUND_OFFSETS = (4, 5, 6)
CONTRAST_EPS = 1e-6


@dataclass(frozen=True)
class FeatureVector:
    grad_mean: float
    grad_var: float
    continuity: float
    length: float
    contrast: float
    empty: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES])

    @classmethod
    def from_array(cls, values, empty: bool = False) -> "FeatureVector":
        return cls(*(float(v) for v in values), empty=empty)


EMPTY_FEATURES = FeatureVector(0.0, 0.0, 0.0, 0.0, 0.0, empty=True)


def compute_features(img, grad: GradientField, path: LinePath,
                     ridge_offset: int = TrackParams.ridge_offset) -> FeatureVector:
    """Gradient statistics, fragmentation and local contrast along ``path``.

    ``img`` and ``grad`` must come from the same raster the path was
    tracked on.  The gradient is read through the same ridge response the
    tracker used, i.e. on the flanks surrounding each line pixel.  An empty
    path yields ``EMPTY_FEATURES``.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if grad.magnitude.shape != img.shape or path.width != w:
        raise ParameterError(
            f"inconsistent shapes: image {img.shape}, gradient {grad.magnitude.shape}, path width {path.width}")
    rows = path.as_array()
    cols = np.flatnonzero(rows >= 0)
    if cols.size == 0:
        return EMPTY_FEATURES
    r = rows[cols]
    mags = ridge_response(grad.magnitude, ridge_offset)[r, cols]
    grad_mean = float(mags.mean())
    grad_var = float(mags.var(ddof=1)) if mags.size > 1 else 0.0

    arc = 0.0
    for start, end in path.segments:
        d = np.diff(rows[start:end + 1]).astype(np.float64)
        arc += float(np.sqrt(1.0 + d * d).sum())
    length = arc / (w - 1)

    line_i = img[r, cols]
    bg = np.zeros(cols.size)
    for d in BACKGROUND_OFFSETS:
        bg += img[np.clip(r - d, 0, h - 1), cols] + img[np.clip(r + d, 0, h - 1), cols]
    bg /= 2 * len(BACKGROUND_OFFSETS)
    contrast = float(np.mean((line_i - bg) / (line_i + bg + CONTRAST_EPS)))
    return FeatureVector(grad_mean, grad_var, cols.size / w, length, contrast)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        """Features with zero spread; these pass through unscaled."""
        return self.std == 0.0


def fit_feature_stats(vectors) -> FeatureStats:
    """Per-feature mean and sample standard deviation (n - 1 denominator)."""
    x = np.array([v.as_array() if isinstance(v, FeatureVector) else np.asarray(v, dtype=np.float64)
                  for v in vectors])
    if x.ndim != 2 or x.shape[0] == 0:
        raise ParameterError("fit_feature_stats needs at least one vector")
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    # rounding in the mean leaves ~1e-16 spread on constant columns
    std = np.where(np.ptp(x, axis=0) == 0.0, 0.0, std)
    return FeatureStats(mean=mean, std=std)


def normalize(v, stats: FeatureStats):
    x = v.as_array() if isinstance(v, FeatureVector) else np.asarray(v, dtype=np.float64)
    scale = np.where(stats.constant, 1.0, stats.std)
    shift = np.where(stats.constant, 0.0, stats.mean)
    z = (x - shift) / scale
    return FeatureVector.from_array(z, v.empty) if isinstance(v, FeatureVector) else z


def denormalize(v, stats: FeatureStats):
    z = v.as_array() if isinstance(v, FeatureVector) else np.asarray(v, dtype=np.float64)
    scale = np.where(stats.constant, 1.0, stats.std)
    shift = np.where(stats.constant, 0.0, stats.mean)
    x = z * scale + shift
    return FeatureVector.from_array(x, v.empty) if isinstance(v, FeatureVector) else x


FEATURE_CSV_HEADER = ("path", "patient_id", "stage", *FEATURE_NAMES, "empty_flag")


def write_feature_csv(rows, dest) -> None:
    """``rows`` is an iterable of ``(element, FeatureVector)`` pairs."""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURE_CSV_HEADER)
        for e, fv in rows:
            writer.writerow([e.path, e.patient_id, e.stage,
                             *(repr(getattr(fv, n)) for n in FEATURE_NAMES), int(fv.empty)])


def read_feature_csv(src) -> dict[str, FeatureVector]:
    """Map element path to its feature vector."""
    out = {}
    with Path(src).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            out[rec["path"]] = FeatureVector(*(float(rec[n]) for n in FEATURE_NAMES),
                                             empty=rec["empty_flag"] == "1")
    return out
