"""Geometric augmentation: crop-and-zoom and small rotations about the probe axis.

Both transforms are expressed as a map from output pixel coordinates to
source coordinates followed by bilinear sampling with edge replication, so
the same map can be applied to ground-truth points.
"""
from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import ParameterError, bilinear_sample, check_image
from .manifest import Element

AUGMENT_KINDS = ("identity", "crop_zoom", "rotate")
ZOOM_RANGE = (0.85, 0.98)
MAX_ANGLE = 5.0
MIN_ANGLE = 1.0  # drawn variants stay clear of the identity
CENTRE_JITTER = 0.02  # fraction of each dimension


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "identity"
    zoom_fraction: float = 0.9
    angle_degrees: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ParameterError(f"kind must be one of {AUGMENT_KINDS}, got {self.kind!r}")
        if self.kind == "crop_zoom" and not ZOOM_RANGE[0] <= self.zoom_fraction <= ZOOM_RANGE[1]:
            raise ParameterError(f"zoom_fraction must lie in {list(ZOOM_RANGE)}, got {self.zoom_fraction}")
        if self.kind == "rotate":
            if self.angle_degrees == 0.0:
                raise ParameterError("rotate needs a non-zero angle")
            if abs(self.angle_degrees) > MAX_ANGLE:
                raise ParameterError(f"|angle| must not exceed {MAX_ANGLE} degrees, got {self.angle_degrees}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True)
class CropWindow:
    """Continuous crop window; output ``(r, c)`` samples source ``(a_r*r + b_r, a_c*c + b_c)``."""

    top: float
    left: float
    height: float
    width: float
    out_height: int
    out_width: int

    @property
    def coefficients(self) -> tuple[float, float, float, float]:
        a_r = self.height / self.out_height
        a_c = self.width / self.out_width
        return a_r, self.top + 0.5 * a_r - 0.5, a_c, self.left + 0.5 * a_c - 0.5

    def to_source(self, rows, cols):
        a_r, b_r, a_c, b_c = self.coefficients
        return a_r * np.asarray(rows, dtype=np.float64) + b_r, a_c * np.asarray(cols, dtype=np.float64) + b_c

    def from_source(self, rows, cols):
        """Where source pixel coordinates land in the zoomed output."""
        a_r, b_r, a_c, b_c = self.coefficients
        return (np.asarray(rows, dtype=np.float64) - b_r) / a_r, (np.asarray(cols, dtype=np.float64) - b_c) / a_c


def crop_window(shape: tuple[int, int], spec: AugmentSpec) -> CropWindow:
    if spec.kind != "crop_zoom":
        raise ParameterError(f"crop window needs a crop_zoom spec, got {spec.kind}")
    h, w = shape
    ch, cw = spec.zoom_fraction * h, spec.zoom_fraction * w
    if ch < 3 or cw < 3:
        raise ParameterError(f"crop of {cw:.2f}x{ch:.2f} pixels is smaller than 3x3")
    rng = np.random.default_rng(spec.seed)
    dy, dx = rng.uniform(-CENTRE_JITTER, CENTRE_JITTER, size=2) * (h, w)
    # keep the window inside the raster
    cy = np.clip(h / 2 + dy, ch / 2, h - ch / 2)
    cx = np.clip(w / 2 + dx, cw / 2, w - cw / 2)
    return CropWindow(top=float(cy - ch / 2), left=float(cx - cw / 2), height=ch, width=cw,
                      out_height=h, out_width=w)


def crop_and_zoom(img, spec: AugmentSpec) -> np.ndarray:
    """Centred crop of linear scale ``zoom_fraction``, resized back to the input size."""
    arr = check_image(img)
    win = crop_window(arr.shape, spec)
    h, w = arr.shape
    rr, cc = win.to_source(*np.meshgrid(np.arange(h), np.arange(w), indexing="ij"))
    return np.clip(bilinear_sample(arr, rr, cc), 0.0, 1.0)


def rotate_points(x, y, shape: tuple[int, int], angle_degrees: float):
    """Rotate continuous points about the top-centre ``(width / 2, 0)``.

    ``x`` runs right and ``y`` down, with pixel ``(r, c)`` centred at
    ``(c + 0.5, r + 0.5)``.  Positive angles turn content counter-clockwise
    as displayed.
    """
    h, w = shape
    t = np.deg2rad(angle_degrees)
    dx = np.asarray(x, dtype=np.float64) - w / 2
    dy = np.asarray(y, dtype=np.float64)
    return w / 2 + dx * np.cos(t) + dy * np.sin(t), -dx * np.sin(t) + dy * np.cos(t)


def rotate_about_probe_axis(img, spec: AugmentSpec) -> np.ndarray:
    """Rotate about the top-centre pivot; uncovered samples replicate the border."""
    if spec.kind != "rotate":
        raise ParameterError(f"rotation needs a rotate spec, got {spec.kind}")
    arr = check_image(img)
    h, w = arr.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: output point comes from the source rotated by -angle
    xs, ys = rotate_points(cc + 0.5, rr + 0.5, arr.shape, -spec.angle_degrees)
    return np.clip(bilinear_sample(arr, ys - 0.5, xs - 0.5), 0.0, 1.0)


def apply_augment(img, spec: AugmentSpec) -> np.ndarray:
    if spec.kind == "crop_zoom":
        return crop_and_zoom(img, spec)
    if spec.kind == "rotate":
        return rotate_about_probe_axis(img, spec)
    return check_image(img).copy()


def variant_spec(seed: int, index: int, variant: int) -> AugmentSpec:
    """Deterministic spec for ``variant`` (1-based) of element ``index``.

    Odd variants crop-and-zoom, even variants rotate.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, variant]))
    child = int(rng.integers(0, 2 ** 63))
    if variant % 2 == 1:
        return AugmentSpec(kind="crop_zoom", zoom_fraction=float(rng.uniform(*ZOOM_RANGE)), seed=child)
    angle = float(rng.uniform(MIN_ANGLE, MAX_ANGLE)) * (1.0 if rng.random() < 0.5 else -1.0)
    return AugmentSpec(kind="rotate", angle_degrees=angle, seed=child)


def variant_path(path: str, variant: int) -> str:
    p = Path(path)
    return (p.parent / f"{p.stem}_a{variant}{p.suffix}").as_posix()


def augment_element(index: int, element: Element, root, out_dir, variants_per_image: int,
                    seed: int) -> list[Element]:
    """Copy one source and write its variants; returns the new manifest rows."""
    from .io import DataError, read_image, write_image

    root, out_dir = Path(root), Path(out_dir)
    src = root / element.path
    dst = out_dir / element.path
    if not src.is_file():
        raise DataError(f"{src}: image not found")
    dst.parent.mkdir(parents=True, exist_ok=True)
    if src.resolve() != dst.resolve():
        shutil.copyfile(src, dst)
    rows = [element]
    if variants_per_image == 0:
        return rows
    img = read_image(src)
    for v in range(1, variants_per_image + 1):
        rel = variant_path(element.path, v)
        write_image(apply_augment(img, variant_spec(seed, index, v)), out_dir / rel)
        rows.append(Element(path=rel, patient_id=element.patient_id, stage=element.stage,
                            variant=v, origin_path=element.path))
    return rows


def augment_dataset(elements, root, out_dir, variants_per_image: int = 3, seed: int = 0,
                    jobs: int = 1) -> list[Element]:
    """Each source yields itself plus ``variants_per_image`` augmented copies.

    Relative paths are resolved against ``root`` and written under
    ``out_dir``; the returned rows keep source order.
    """
    elements = list(elements)
    if not elements:
        raise ParameterError("cannot augment an empty manifest")
    if variants_per_image < 0:
        raise ParameterError(f"variants_per_image must be non-negative, got {variants_per_image}")
    for e in elements:
        if e.variant != 0:
            raise ParameterError(f"{e.path} is already an augmented variant")
    args = [(i, e, root, out_dir, variants_per_image, seed) for i, e in enumerate(elements)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            groups = list(pool.map(augment_element, *zip(*args)))
    else:
        groups = [augment_element(*a) for a in args]
    return [row for group in groups for row in group]
