from dataclasses import replace
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glisson.augment import (AugmentSpec, apply_augment, augment_dataset, crop_and_zoom, crop_window,
                             rotate_about_probe_axis, rotate_points, variant_path, variant_spec)
from glisson.imaging import ParameterError, srad_despeckle
from glisson.io import DataError
from glisson.manifest import Element, read_manifest, write_manifest
from glisson.phantom import generate_dataset, generate_phantom, stage_defaults
from glisson.pipeline import extract


@pytest.mark.parametrize("kwargs", [dict(kind="shear"), dict(kind="rotate", angle_degrees=0.0),
                                    dict(kind="rotate", angle_degrees=5.5),
                                    dict(kind="rotate", angle_degrees=-6.0),
                                    dict(kind="crop_zoom", zoom_fraction=1.0),
                                    dict(kind="crop_zoom", zoom_fraction=0.5), dict(seed=-1)])
def test_spec_rejects_invalid(kwargs):
    with pytest.raises(ParameterError):
        AugmentSpec(**kwargs)


@pytest.mark.parametrize("spec", [AugmentSpec("crop_zoom", zoom_fraction=0.9, seed=4),
                                  AugmentSpec("rotate", angle_degrees=-3.0),
                                  AugmentSpec("identity")])
def test_constant_image_stays_constant(spec):
    out = apply_augment(np.full((90, 310), 0.37), spec)
    assert out.shape == (90, 310)
    assert np.allclose(out, 0.37, atol=1e-15)


def test_crop_zoom_preserves_dimensions(rng):
    out = crop_and_zoom(rng.random((90, 310)), AugmentSpec("crop_zoom", zoom_fraction=0.9, seed=1))
    assert out.shape == (90, 310)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_crop_smaller_than_3x3_rejected():
    with pytest.raises(ParameterError):
        crop_and_zoom(np.zeros((3, 40)), AugmentSpec("crop_zoom", zoom_fraction=0.9))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.85, 0.98), st.integers(0, 2 ** 63))
def test_crop_window_stays_inside_and_is_jitter_bounded(zoom, seed):
    win = crop_window((90, 310), AugmentSpec("crop_zoom", zoom_fraction=zoom, seed=seed))
    assert 0.0 <= win.top and win.top + win.height <= 90 + 1e-9
    assert 0.0 <= win.left and win.left + win.width <= 310 + 1e-9
    assert abs(win.top + win.height / 2 - 45) <= 0.02 * 90 + 1e-9
    assert abs(win.left + win.width / 2 - 155) <= 0.02 * 310 + 1e-9
    r, c = win.from_source(*win.to_source([0.0, 17.0], [3.0, 250.0]))
    assert np.allclose(r, [0.0, 17.0]) and np.allclose(c, [3.0, 250.0])


def _transformed_truth(truth, win, width):
    """Ground-truth row seen at each output column, via the crop's affine map."""
    rows = truth.as_array().astype(np.float64)
    _, src_cols = win.to_source(np.zeros(width), np.arange(width))
    src_rows = np.interp(src_cols, np.arange(width), rows)
    out_rows, _ = win.from_source(src_rows, np.zeros(width))
    return out_rows


@pytest.mark.parametrize("stage", [0, 1])
def test_crop_zoom_line_follows_transformed_truth(stage):
    for i in range(5):
        p = replace(stage_defaults(stage), looks=None, gap_fraction=0.0, seed=50 + i)
        ph = generate_phantom(p)
        spec = variant_spec(seed=i, index=stage, variant=1)
        out = crop_and_zoom(ph.image, spec)
        expected = _transformed_truth(ph.truth_path, crop_window(ph.image.shape, spec), 310)
        got = extract(out).path.as_array()
        assert np.all(got >= 0)
        assert np.max(np.abs(got - expected)) <= 3


def test_rotation_round_trip_loss_is_small():
    ph = generate_phantom(replace(stage_defaults(2), seed=8))
    img = srad_despeckle(ph.image)
    for angle in (5.0, -5.0):
        there = rotate_about_probe_axis(img, AugmentSpec("rotate", angle_degrees=angle))
        back = rotate_about_probe_axis(there, AugmentSpec("rotate", angle_degrees=-angle))
        assert np.mean(np.abs(back - img)) <= 0.02


def test_rotate_points_round_trip_and_pivot():
    x, y = np.array([155.0, 0.0, 310.0]), np.array([0.0, 45.0, 90.0])
    xr, yr = rotate_points(x, y, (90, 310), 4.0)
    assert (xr[0], yr[0]) == (155.0, 0.0)
    xb, yb = rotate_points(xr, yr, (90, 310), -4.0)
    assert np.allclose(xb, x) and np.allclose(yb, y)


def test_rotation_moves_bright_spot_where_points_go():
    img = np.full((90, 310), 0.1)
    img[59:62, 219:222] = 0.9
    out = rotate_about_probe_axis(img, AugmentSpec("rotate", angle_degrees=5.0))
    xr, yr = rotate_points(220.5, 60.5, img.shape, 5.0)
    r, c = np.unravel_index(np.argmax(out), out.shape)
    assert abs(r + 0.5 - yr) <= 1.0 and abs(c + 0.5 - xr) <= 1.0


def test_variant_specs_alternate_and_are_deterministic():
    specs = [variant_spec(7, 3, v) for v in (1, 2, 3)]
    assert [s.kind for s in specs] == ["crop_zoom", "rotate", "crop_zoom"]
    assert 1.0 <= abs(specs[1].angle_degrees) <= 5.0
    assert specs == [variant_spec(7, 3, v) for v in (1, 2, 3)]
    assert variant_spec(8, 3, 1) != specs[0]


def test_variant_path():
    assert variant_path("images/P0.pgm", 2) == "images/P0_a2.pgm"


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def sources(tmp_path_factory):
    root = tmp_path_factory.mktemp("src")
    return root, generate_dataset(2, root, seed=5)


def test_augment_dataset_counts_and_identity(sources, tmp_path):
    root, elements = sources
    out = augment_dataset(elements, root, tmp_path / "aug", variants_per_image=3, seed=1)
    assert len(out) == 4 * len(elements)
    for k, e in enumerate(elements):
        group = out[4 * k:4 * k + 4]
        assert group[0] == e
        assert [g.variant for g in group] == [0, 1, 2, 3]
        assert all(g.patient_id == e.patient_id and g.stage == e.stage for g in group)
        assert all(g.origin_path == e.path for g in group[1:])
        assert all((tmp_path / "aug" / g.path).is_file() for g in group)


def test_zero_variants_gives_identical_manifest(sources, tmp_path):
    root, elements = sources
    out = augment_dataset(elements[:1], root, tmp_path / "aug", variants_per_image=0)
    assert out == elements[:1]
    write_manifest(out, tmp_path / "a.csv")
    write_manifest(elements[:1], tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_same_seed_is_byte_identical(sources, tmp_path):
    root, elements = sources
    for name in ("a", "b"):
        rows = augment_dataset(elements, root, tmp_path / name, variants_per_image=2, seed=9)
        write_manifest(rows, tmp_path / name / "manifest.csv")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert read_manifest(tmp_path / "a" / "manifest.csv") == rows


def test_parallel_matches_serial(sources, tmp_path):
    root, elements = sources
    a = augment_dataset(elements, root, tmp_path / "a", variants_per_image=1, seed=2, jobs=1)
    b = augment_dataset(elements, root, tmp_path / "b", variants_per_image=1, seed=2, jobs=2)
    assert a == b
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_augment_dataset_rejections(sources, tmp_path):
    root, elements = sources
    with pytest.raises(ParameterError):
        augment_dataset([], root, tmp_path)
    with pytest.raises(ParameterError):
        augment_dataset(elements, root, tmp_path, variants_per_image=-1)
    with pytest.raises(ParameterError):
        augment_dataset([replace(elements[0], variant=1)], root, tmp_path)
    with pytest.raises(DataError, match="missing.pgm"):
        augment_dataset([Element("images/missing.pgm", "PX", "F0")], root, tmp_path)
