"""Stage-parameterised synthetic ultrasound ROIs with a known Glisson line.

These stand in for clinical images: a bright quasi-horizontal line whose
brightness, fragmentation and waviness degrade with fibrosis stage, over a
dark background, corrupted by multiplicative gamma speckle.  A brighter
near-field layer (the abdominal wall) fades into the background above the
line; its level does not depend on stage, so percentile contrast stretching
cannot rescale the line brightness away.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .imaging import ROI_HEIGHT, ROI_WIDTH, ParameterError
from .line import LinePath, write_path_csv
from .manifest import Element, STAGE_NAMES, write_manifest

BACKGROUND = 0.25
PROFILE_SIGMA = 1.5
JITTER_SMOOTHING = 2.0
MEAN_GAP_RUN = 12.0
NEAR_FIELD_LEVEL = 0.7
NEAR_FIELD_DEPTH = 0.2  # fraction of the height
NEAR_FIELD_EDGE = 6.0  # logistic width in rows; soft enough not to attract the tracker

# (brightness, gap_fraction, jitter_sigma) at F0 and F4
F0_PARAMS = (0.90, 0.02, 0.5)
F4_PARAMS = (0.55, 0.35, 2.5)


@dataclass(frozen=True)
class PhantomParams:
    stage: int
    line_brightness: float
    gap_fraction: float
    jitter_sigma: float
    looks: Optional[int] = 4
    width: int = ROI_WIDTH
    height: int = ROI_HEIGHT
    seed: int = 0

    def __post_init__(self):
        if self.stage not in range(5):
            raise ParameterError(f"stage must be 0-4, got {self.stage}")
        if not BACKGROUND < self.line_brightness <= 1.0:
            raise ParameterError(f"line_brightness must lie in ({BACKGROUND}, 1], got {self.line_brightness}")
        if not 0.0 <= self.gap_fraction < 1.0:
            raise ParameterError(f"gap_fraction must lie in [0, 1), got {self.gap_fraction}")
        if self.jitter_sigma < 0.0:
            raise ParameterError(f"jitter_sigma must be non-negative, got {self.jitter_sigma}")
        if self.looks is not None and self.looks < 1:
            raise ParameterError(f"looks must be a positive integer or None, got {self.looks}")
        if self.width < 3 or self.height < 8:
            raise ParameterError(f"phantom too small: {self.width}x{self.height}")


@dataclass(frozen=True)
class PhantomTruth:
    image: np.ndarray
    truth_path: LinePath
    stage: int


def stage_defaults(stage: int) -> PhantomParams:
    """Linear interpolation of the line appearance between F0 and F4."""
    if stage not in range(5):
        raise ParameterError(f"stage must be 0-4, got {stage}")
    t = stage / 4.0
    b, g, j = (a + t * (z - a) for a, z in zip(F0_PARAMS, F4_PARAMS))
    return PhantomParams(stage=stage, line_brightness=b, gap_fraction=g, jitter_sigma=j)


def _gap_mask(rng: np.random.Generator, width: int, gap_fraction: float) -> np.ndarray:
    """Two-state Markov chain started at stationarity; runs are geometric."""
    if gap_fraction == 0.0:
        return np.zeros(width, dtype=bool)
    p_end_gap = 1.0 / MEAN_GAP_RUN
    p_start_gap = p_end_gap * gap_fraction / (1.0 - gap_fraction)
    u = rng.random(width)
    gaps = np.empty(width, dtype=bool)
    gaps[0] = u[0] < gap_fraction
    for c in range(1, width):
        gaps[c] = (u[c] >= p_end_gap) if gaps[c - 1] else (u[c] < p_start_gap)
    return gaps


def generate_phantom(params: PhantomParams) -> PhantomTruth:
    rng = np.random.default_rng(params.seed)
    w, h = params.width, params.height
    cols = np.arange(w)
    centre = h / 2 + (h / 8) * np.sin(np.pi * cols / w)
    jitter = np.zeros(w)
    if params.jitter_sigma > 0:
        raw = gaussian_filter1d(rng.standard_normal(w), JITTER_SMOOTHING, mode="reflect")
        jitter = params.jitter_sigma * raw / raw.std()
    rows = np.clip(np.round(centre + jitter), 0, h - 1).astype(np.int64)
    gaps = _gap_mask(rng, w, params.gap_fraction)

    r = np.arange(h)[:, None]
    profile = np.exp(-((r - rows[None, :]) ** 2) / (2 * PROFILE_SIGMA ** 2))
    profile[:, gaps] = 0.0
    base = BACKGROUND + (NEAR_FIELD_LEVEL - BACKGROUND) / (1.0 + np.exp((r - NEAR_FIELD_DEPTH * h) / NEAR_FIELD_EDGE))
    clean = base + (params.line_brightness - BACKGROUND) * profile
    if params.looks is None:
        img = clean
    else:
        img = clean * rng.gamma(params.looks, 1.0 / params.looks, size=clean.shape)
    img = np.clip(img, 0.0, 1.0)
    truth = LinePath(w, tuple(None if g else int(rr) for rr, g in zip(rows, gaps)))
    return PhantomTruth(image=img, truth_path=truth, stage=params.stage)


DEFAULT_ROSTER = (44, 31, 35, 20, 27)


def generate_dataset(n_per_stage: int | Sequence[int], out_dir, seed: int = 0,
                     fmt: str = "pgm", **overrides) -> list[Element]:
    """Write phantom images, truth paths and ``manifest.csv`` under ``out_dir``.

    ``n_per_stage`` is either one count used for every stage or five per-stage
    counts (e.g. ``DEFAULT_ROSTER``).  ``overrides`` replace fields of the stage
    defaults (``width``, ``height``, ``looks`` ...).
    """
    from .io import write_image

    counts = [n_per_stage] * 5 if isinstance(n_per_stage, int) else list(n_per_stage)
    if len(counts) != 5 or any(int(n) < 1 for n in counts):
        raise ParameterError(f"need five positive per-stage counts, got {counts}")
    out_dir = Path(out_dir)
    seeds = np.random.SeedSequence(seed).spawn(sum(counts))
    elements = []
    k = 0
    for stage, n in enumerate(counts):
        for i in range(n):
            patient = f"P{stage}{i:04d}"
            child_seed = int(seeds[k].generate_state(1, dtype=np.uint64)[0])
            k += 1
            params = replace(stage_defaults(stage), seed=child_seed, **overrides)
            ph = generate_phantom(params)
            rel = Path("images") / f"{patient}.{fmt}"
            write_image(ph.image, out_dir / rel)
            write_path_csv(ph.truth_path, out_dir / "truth" / f"{patient}.csv")
            elements.append(Element(path=rel.as_posix(), patient_id=patient,
                                    stage=STAGE_NAMES[stage], variant=0, origin_path=rel.as_posix()))
    write_manifest(elements, out_dir / "manifest.csv")
    return elements
