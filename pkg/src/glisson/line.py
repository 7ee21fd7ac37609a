"""Glisson line tracking over an edge-magnitude field."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .imaging import GradientField, ParameterError


@dataclass(frozen=True)
class TrackParams:
    tau: float = 0.25
    lam: float = 0.25
    max_jump: int = 3
    ridge_offset: int = 2
    band_top: Optional[int] = None
    band_bottom: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ParameterError(f"tau must lie in [0, 1), got {self.tau}")
        if self.lam < 0.0:
            raise ParameterError(f"lambda must be non-negative, got {self.lam}")
        if int(self.max_jump) != self.max_jump or self.max_jump < 1:
            raise ParameterError(f"max_jump must be a positive integer, got {self.max_jump}")
        if int(self.ridge_offset) != self.ridge_offset or self.ridge_offset < 0:
            raise ParameterError(f"ridge_offset must be a non-negative integer, got {self.ridge_offset}")
        if (self.band_top is None) != (self.band_bottom is None):
            raise ParameterError("band_top and band_bottom must be given together")
        if self.band_top is not None and not 0 <= self.band_top < self.band_bottom:
            raise ParameterError(f"invalid band [{self.band_top}, {self.band_bottom})")

    def band(self, height: int) -> tuple[int, int]:
        if self.band_top is None:
            return 0, height
        if self.band_bottom > height:
            raise ParameterError(f"band bottom {self.band_bottom} exceeds image height {height}")
        return self.band_top, self.band_bottom


def path_segments(rows: Sequence[Optional[int]]) -> list[tuple[int, int]]:
    """Maximal runs of consecutive detected columns as inclusive ``(start, end)`` pairs."""
    segments = []
    start = None
    for c, r in enumerate(rows):
        if r is not None and start is None:
            start = c
        elif r is None and start is not None:
            segments.append((start, c - 1))
            start = None
    if start is not None:
        segments.append((start, len(rows) - 1))
    return segments


@dataclass(frozen=True)
class LinePath:
    width: int
    rows: tuple
    segments: tuple = field(init=False)

    def __post_init__(self):
        rows = tuple(None if r is None else int(r) for r in self.rows)
        if len(rows) != self.width:
            raise ParameterError(f"path has {len(rows)} rows for width {self.width}")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "segments", tuple(path_segments(rows)))

    @classmethod
    def from_array(cls, rows: np.ndarray) -> "LinePath":
        """Build from an int array where negative entries mark gaps."""
        return cls(len(rows), tuple(None if r < 0 else int(r) for r in rows))

    def as_array(self) -> np.ndarray:
        return np.array([-1 if r is None else r for r in self.rows], dtype=np.int64)

    @property
    def detected(self) -> np.ndarray:
        return np.array([r is not None for r in self.rows], dtype=bool)

    @property
    def n_detected(self) -> int:
        return sum(r is not None for r in self.rows)

    def check_height(self, height: int) -> None:
        for r in self.rows:
            if r is not None and not 0 <= r < height:
                raise ParameterError(f"row {r} outside image height {height}")


def track_path(score: np.ndarray, lam: float, max_jump: int,
               band: tuple[int, int] | None = None) -> tuple[np.ndarray, float]:
    """Minimum-cost left-to-right path through ``score``.

    Minimises ``sum(-score[r_c, c]) + lam * sum(|r_c - r_{c-1}|)`` subject to
    ``|r_c - r_{c-1}| <= max_jump`` and rows inside ``band``.  Ties go to the
    smaller row index.  Returns the row per column and the path cost.
    """
    h, w = score.shape
    top, bottom = band if band is not None else (0, h)
    sub = -np.asarray(score, dtype=np.float64)[top:bottom]
    n = bottom - top
    offsets = np.arange(-max_jump, max_jump + 1)
    back = np.zeros((w, n), dtype=np.intp)
    cost = sub[:, 0].copy()
    idx = np.arange(n)
    step_cost = lam * np.abs(np.broadcast_to(offsets[:, None], (offsets.size, n)))
    for c in range(1, w):
        # candidates[k, r] = cost of arriving at r from r + offsets[k]
        src = idx[None, :] + offsets[:, None]
        valid = (src >= 0) & (src < n)
        cand = np.full(src.shape, np.inf)
        cand[valid] = cost[src[valid]] + step_cost[valid]
        # offsets ascend, so argmin's first-hit rule prefers the smaller source row
        k = np.argmin(cand, axis=0)
        back[c] = src[k, idx]
        cost = cand[k, idx] + sub[:, c]
    end = int(np.argmin(cost))
    total = float(cost[end])
    rows = np.empty(w, dtype=np.int64)
    rows[-1] = end
    for c in range(w - 1, 0, -1):
        rows[c - 1] = back[c, rows[c]]
    return rows + top, total


def ridge_response(magnitude: np.ndarray, offset: int) -> np.ndarray:
    """Mean edge magnitude ``offset`` rows above and below each pixel.

    A bright line of finite thickness has its two Prewitt flanks on either
    side of its centre, so this peaks on the line itself.  ``offset=0``
    returns the magnitude unchanged.
    """
    mag = np.asarray(magnitude, dtype=np.float64)
    if offset == 0:
        return mag
    h = mag.shape[0]
    r = np.arange(h)
    return 0.5 * (mag[np.clip(r - offset, 0, h - 1)] + mag[np.clip(r + offset, 0, h - 1)])


def extract_line(grad: GradientField, params: TrackParams | None = None) -> LinePath:
    """Track the Glisson line as the strongest smooth ridge path.

    The ridge response (see ``ridge_response``) is normalised by its global
    maximum.  After the optimal path is found, columns whose chosen pixel
    falls below ``tau`` become gaps.
    """
    params = params or TrackParams()
    resp = ridge_response(grad.magnitude, params.ridge_offset)
    h, w = resp.shape
    band = params.band(h)
    peak = resp.max()
    if peak <= 0.0:
        return LinePath(w, (None,) * w)
    m = resp / peak
    rows, _ = track_path(m, params.lam, params.max_jump, band)
    keep = m[rows, np.arange(w)] >= params.tau
    return LinePath(w, tuple(int(r) if k else None for r, k in zip(rows, keep)))


def line_to_binary(path: LinePath, width: int, height: int) -> np.ndarray:
    if path.width != width:
        raise ParameterError(f"path width {path.width} does not match raster width {width}")
    path.check_height(height)
    out = np.zeros((height, width))
    for c, r in enumerate(path.rows):
        if r is not None:
            out[r, c] = 1.0
    return out


def write_path_csv(path: LinePath, dest) -> None:
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["column", "row"])
        for c, r in enumerate(path.rows):
            writer.writerow([c, "" if r is None else r])


def read_path_csv(src) -> LinePath:
    with Path(src).open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [None if rec["row"] == "" else int(rec["row"]) for rec in reader]
    return LinePath(len(rows), tuple(rows))
