import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentreg._validation import ValidationError
from latentreg.cloud import (CloudFormatError, NnIndex, chamfer, density_counts, density_stddev,
                             nn_distance, nn_distance_vector, read_cloud, read_pcd3, write_cloud,
                             write_pcd3)


def brute_nn(p, q):
    return np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(-1)).min(axis=1)


def brute_chamfer(p, q):
    return brute_nn(p, q).mean() + brute_nn(q, p).mean()


def brute_counts(x, r):
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    return (d < r).sum(axis=1) - 1


clouds = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)),
                elements=st.floats(-10, 10, allow_nan=False, width=64))


@settings(max_examples=100, deadline=None)
@given(clouds, clouds)
def test_nn_and_chamfer_match_brute_force(p, q):
    assert np.allclose(nn_distance_vector(p, q), brute_nn(p, q), atol=1e-12, rtol=0)
    assert abs(chamfer(p, q) - brute_chamfer(p, q)) <= 1e-12 * max(1.0, brute_chamfer(p, q))


def test_nn_distance_single_point():
    q = np.array([[0.0, 0, 0], [3, 0, 0]])
    assert nn_distance([2.0, 0, 0], q) == pytest.approx(1.0)
    d, i = NnIndex(q).query([[2.9, 0, 0]])
    assert i[0] == 1


def test_chamfer_of_identical_clouds_is_zero():
    x = np.random.default_rng(0).standard_normal((40, 3))
    assert chamfer(x, x[::-1]) == 0.0


@settings(max_examples=100, deadline=None)
@given(clouds.filter(lambda x: len(x) >= 2), st.floats(0.1, 8.0))
def test_density_counts_match_brute_force(x, r):
    assert np.array_equal(density_counts(x, r), brute_counts(x, r))
    assert density_stddev(x, r) == pytest.approx(np.std(brute_counts(x, r), ddof=1), abs=1e-12)


def test_density_radius_is_strict():
    x = np.array([[0.0, 0, 0], [0.5, 0, 0], [2.0, 0, 0]])
    assert density_counts(x, 0.5).tolist() == [0, 0, 0]
    assert density_counts(x, 0.5000001).tolist() == [1, 1, 0]


def test_density_stddev_needs_two_points():
    with pytest.raises(ValidationError):
        density_stddev(np.zeros((1, 3)), 0.1)


def test_pcd3_round_trip(tmp_path):
    x = np.random.default_rng(1).standard_normal((17, 3)).astype(np.float32).astype(float)
    write_pcd3(tmp_path / "a.pcd3", x)
    assert np.array_equal(read_pcd3(tmp_path / "a.pcd3"), x)
    assert np.array_equal(read_cloud(tmp_path / "a.pcd3"), x)


def test_pcd3_detects_truncation_and_magic(tmp_path):
    write_pcd3(tmp_path / "a.pcd3", np.zeros((4, 3)))
    data = (tmp_path / "a.pcd3").read_bytes()
    (tmp_path / "b.pcd3").write_bytes(data[:-4])
    with pytest.raises(CloudFormatError):
        read_pcd3(tmp_path / "b.pcd3")
    (tmp_path / "c.pcd3").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CloudFormatError):
        read_pcd3(tmp_path / "c.pcd3")


def test_text_cloud_round_trip_and_errors(tmp_path):
    x = np.array([[1.5, 2.0, -3.0], [0.0, 0.25, 1e-3]])
    write_cloud(tmp_path / "a.xyz", x)
    assert np.allclose(read_cloud(tmp_path / "a.xyz"), x)
    (tmp_path / "bad.xyz").write_text("# header\n1 2\n")
    with pytest.raises(CloudFormatError):
        read_cloud(tmp_path / "bad.xyz")


def test_non_finite_cloud_rejected():
    with pytest.raises(ValidationError):
        chamfer(np.array([[np.nan, 0, 0]]), np.zeros((1, 3)))
