from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glisson.features import (EMPTY_FEATURES, FEATURE_CSV_HEADER, FeatureVector, compute_features,
                              denormalize, fit_feature_stats, normalize, read_feature_csv,
                              write_feature_csv)
from glisson.imaging import ParameterError, prewitt_gradient
from glisson.line import LinePath
from glisson.manifest import Element
from glisson.phantom import generate_phantom, stage_defaults
from glisson.pipeline import process_image
from oracles import welford


def _image_with_line(row=20, h=40, w=50):
    img = np.full((h, w), 0.2)
    img[row, :] = 0.9
    return img


def test_full_straight_line_has_unit_continuity_and_length():
    img = _image_with_line()
    fv = compute_features(img, prewitt_gradient(img), LinePath(50, (20,) * 50))
    assert fv.continuity == 1.0
    assert fv.length == 1.0
    assert not fv.empty


def test_half_detected_single_run():
    img = _image_with_line()
    fv = compute_features(img, prewitt_gradient(img), LinePath(50, (20,) * 25 + (None,) * 25))
    assert fv.continuity == 0.5


def test_length_counts_diagonal_steps():
    img = _image_with_line()
    rows = tuple(20 + (c % 2) for c in range(50))
    fv = compute_features(img, prewitt_gradient(img), LinePath(50, rows))
    assert fv.length == pytest.approx(np.sqrt(2.0))


def test_grad_mean_and_variance_at_line_pixels():
    img = _image_with_line()
    grad = prewitt_gradient(img)
    path = LinePath(50, (20,) * 50)
    fv = compute_features(img, grad, path, ridge_offset=0)
    vals = grad.magnitude[20, :]
    assert fv.grad_mean == pytest.approx(vals.mean(), abs=1e-15)
    assert fv.grad_var == pytest.approx(vals.var(ddof=1), abs=1e-15)


def test_contrast_of_bright_line():
    img = _image_with_line()
    fv = compute_features(img, prewitt_gradient(img), LinePath(50, (20,) * 50))
    assert fv.contrast == pytest.approx((0.9 - 0.2) / (0.9 + 0.2 + 1e-6))
    assert -1.0 <= fv.contrast <= 1.0


def test_empty_path_gives_flagged_zero_vector():
    img = _image_with_line()
    fv = compute_features(img, prewitt_gradient(img), LinePath(50, (None,) * 50))
    assert fv == EMPTY_FEATURES
    assert fv.empty and not fv.as_array().any()


def test_inconsistent_shapes_rejected():
    img = _image_with_line()
    with pytest.raises(ParameterError):
        compute_features(img, prewitt_gradient(img), LinePath(49, (20,) * 49))


def test_path_features_invariant_under_monotone_remap():
    ph = generate_phantom(stage_defaults(2))
    ex, fv = process_image(ph.image)
    remapped = ex.enhanced ** 2
    fv2 = compute_features(remapped, prewitt_gradient(remapped), ex.path)
    assert fv2.continuity == fv.continuity
    assert fv2.length == fv.length


def test_grad_mean_scales_linearly():
    rng = np.random.default_rng(3)
    img = 0.5 * rng.random((30, 40))
    path = LinePath(40, tuple(int(r) for r in rng.integers(2, 28, size=40)))
    a = compute_features(img, prewitt_gradient(img), path)
    b = compute_features(2 * img, prewitt_gradient(2 * img), path)
    assert b.grad_mean == pytest.approx(2 * a.grad_mean, rel=1e-12)


def test_f0_batch_beats_f4_batch():
    def batch(stage):
        out = []
        for i in range(50):
            ph = generate_phantom(replace(stage_defaults(stage), seed=700 + 100 * stage + i))
            out.append(process_image(ph.image)[1])
        return np.mean([[f.continuity, f.grad_mean] for f in out], axis=0)

    f0, f4 = batch(0), batch(4)
    assert f0[0] > f4[0]
    assert f0[1] > f4[1]


# statistics --------------------------------------------------------------------

def test_identical_vectors_have_zero_std():
    v = FeatureVector(1.0, 2.0, 0.5, 1.1, 0.3)
    stats = fit_feature_stats([v, v, v])
    assert np.all(stats.std == 0) and np.all(stats.constant)


def test_single_vector_has_zero_std():
    stats = fit_feature_stats([FeatureVector(1.0, 2.0, 0.5, 1.1, 0.3)])
    assert np.all(stats.constant)


def test_two_vector_stats():
    stats = fit_feature_stats([np.zeros(5), np.full(5, 2.0)])
    assert np.array_equal(stats.mean, np.ones(5))
    assert np.allclose(stats.std, np.sqrt(2.0), rtol=0, atol=1e-15)


def test_stats_match_streaming_oracle(rng):
    x = rng.normal(3.0, 2.0, size=(200, 5))
    stats = fit_feature_stats(x)
    mean, std = welford(list(x))
    assert np.max(np.abs(stats.mean - mean)) <= 1e-12
    assert np.max(np.abs(stats.std - std)) <= 1e-12


def test_empty_stats_rejected():
    with pytest.raises(ParameterError):
        fit_feature_stats([])


def test_normalize_mean_is_zero():
    x = np.random.default_rng(1).random((20, 5))
    stats = fit_feature_stats(x)
    assert np.allclose(normalize(stats.mean, stats), 0.0, atol=1e-12)


def test_normalized_training_batch_is_standardised(rng):
    x = rng.normal(size=(100, 5)) * [1, 2, 3, 4, 5] + [5, 4, 3, 2, 1]
    z = normalize(x, fit_feature_stats(x))
    assert np.max(np.abs(z.mean(axis=0))) <= 1e-9
    assert np.max(np.abs(z.std(axis=0, ddof=1) - 1)) <= 1e-9


def test_constant_feature_passes_through():
    x = np.random.default_rng(5).random((10, 5))
    x[:, 2] = 0.7
    stats = fit_feature_stats(x)
    assert stats.constant.tolist() == [False, False, True, False, False]
    assert np.all(normalize(x, stats)[:, 2] == 0.7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5), min_size=2, max_size=20),
       st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5))
def test_normalize_denormalize_roundtrip(rows, v):
    stats = fit_feature_stats(np.array(rows))
    fv = FeatureVector.from_array(v)
    back = denormalize(normalize(fv, stats), stats)
    assert np.allclose(back.as_array(), fv.as_array(), rtol=1e-12, atol=1e-9)


def test_feature_csv_roundtrip(tmp_path):
    e1 = Element("images/a.pgm", "P00000", "F0")
    e2 = Element("images/b.pgm", "P10000", "F1")
    f1 = FeatureVector(1.5, 0.25, 0.9, 1.01, 1 / 3)
    rows = [(e1, f1), (e2, EMPTY_FEATURES)]
    write_feature_csv(rows, tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == ",".join(FEATURE_CSV_HEADER)
    back = read_feature_csv(tmp_path / "f.csv")
    assert back == {"images/a.pgm": f1, "images/b.pgm": EMPTY_FEATURES}
