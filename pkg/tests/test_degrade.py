import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentreg._validation import ValidationError
from latentreg.degrade import (ASYMMETRIC_SHAPES, SHAPES, DegradationModel, curve_outliers,
                               generate_views, jit_noise, load_viewset, make_shape, plane_cut,
                               save_viewset)
from latentreg.geom3d import relative_angle


def test_model_validation():
    with pytest.raises(ValidationError):
        DegradationModel(np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(ValidationError):
        DegradationModel(v=0.0)
    with pytest.raises(ValidationError):
        DegradationModel(o=1.0)
    assert DegradationModel().is_clean
    m = DegradationModel.from_axes(0.1, 0.2, 0.3, v=0.5, o=0.1)
    assert np.allclose(np.diag(m.sigma), [0.01, 0.04, 0.09])
    back = DegradationModel.from_dict(m.to_dict())
    assert np.array_equal(back.sigma, m.sigma) and (back.v, back.o) == (m.v, m.o)
    assert np.allclose(m.scaled(2.0).sigma, 4 * m.sigma)


def test_anisotropic_noise_axis_ratio():
    rng = np.random.default_rng(0)
    x = np.zeros((200000, 3))
    y = jit_noise(x, np.diag([0.03**2, 0.03**2, 0.15**2]), rng)
    s = y.std(axis=0)
    assert s[2] / s[0] == pytest.approx(5.0, rel=0.05)


def test_zero_noise_is_identity():
    x = np.random.default_rng(1).standard_normal((10, 3))
    assert np.array_equal(jit_noise(x, np.zeros((3, 3)), 0), x)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400), st.floats(0.01, 1.0))
def test_plane_cut_keeps_ceil_count(k, v):
    x = np.random.default_rng(k).standard_normal((k, 3))
    y = plane_cut(x, v, np.random.default_rng(0))
    assert len(y) == min(k, math.ceil(v * k - 1e-9))


def test_plane_cut_keeps_one_side_in_order():
    x = np.random.default_rng(2).standard_normal((500, 3))
    n = np.array([0.0, 0.0, 1.0])
    y = plane_cut(x, 0.4, 0, normal=n)
    kept = np.isin(x[:, 2], y[:, 2])
    assert x[kept, 2].max() <= x[~kept, 2].min()
    assert np.array_equal(x[kept], y)


def test_count_rounding_is_exact_for_decimal_ratios():
    x = np.zeros((1000, 3)) + np.arange(1000)[:, None]
    assert len(plane_cut(x, 0.8, 0)) == 800


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 300), st.floats(0.0, 0.6))
def test_curve_outlier_fraction(k, o):
    x = np.random.default_rng(k).standard_normal((k, 3))
    y = curve_outliers(x, o, np.random.default_rng(1))
    n_out = math.ceil(o * k / (1 - o) - 1e-9)
    assert len(y) == k + n_out
    assert np.array_equal(y[:k], x)


def test_curve_outliers_walk_with_fixed_step():
    x = np.zeros((100, 3))
    y = curve_outliers(x, 0.3, np.random.default_rng(3), length=(20, 20))
    steps = np.linalg.norm(np.diff(y[100:120], axis=0), axis=1)
    assert np.allclose(steps, 0.02)


def test_generate_views_truth_and_order(tmp_path):
    ref = make_shape("asym-lamp", 256, rng=0)
    vs = generate_views(ref, 5, DegradationModel(), np.random.default_rng(0))
    for v, p in zip(vs.views, vs.truth):
        assert np.allclose(v, p.apply(ref))
        assert np.all(np.abs(p.translation) <= 0.25)
    save_viewset(vs, tmp_path / "vs")
    back = load_viewset(tmp_path / "vs")
    assert len(back) == 5
    for a, b in zip(back.truth, vs.truth):
        assert relative_angle(a.rotation, b.rotation) < 1e-9
        assert np.array_equal(a.rotation, b.rotation)


def test_generate_views_deterministic():
    ref = make_shape("bent-arrow", 128, rng=0)
    m = DegradationModel.from_axes(0.02, 0.02, 0.02, v=0.8, o=0.2)
    a = generate_views(ref, 4, m, np.random.default_rng(9))
    b = generate_views(ref, 4, m, np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a.views, b.views))


@pytest.mark.parametrize("name", list(SHAPES))
def test_shapes_are_normalized(name):
    x = make_shape(name, 300, rng=1, variation=0.1)
    assert x.shape == (300, 3)
    assert np.allclose(x.mean(axis=0), 0, atol=1e-12)
    assert np.max(np.linalg.norm(x, axis=1)) == pytest.approx(1.0)


def test_asymmetric_shapes_are_not_self_similar_under_half_turns():
    from latentreg.cloud import chamfer
    from latentreg.geom3d import rotation_about
    for name in ASYMMETRIC_SHAPES:
        x = make_shape(name, 1024, rng=0)
        best = min(chamfer(x, x @ rotation_about(ax, 180).T) for ax in np.eye(3))
        assert best > 0.1, name
