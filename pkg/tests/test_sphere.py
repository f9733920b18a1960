import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from endpointalign.errors import AntipodalError
from endpointalign.sphere import (exp_map, geodesic_angle, log_map, normalize,
                                  tangent_frame, tangent_project)

EZ = np.array([0.0, 0.0, 1.0])
EX = np.array([1.0, 0.0, 0.0])


def unit(rng, n):
    return normalize(rng.normal(size=(n, 3)))


class TestExpMap:
    def test_zero_vector_is_identity(self):
        assert np.array_equal(exp_map(EZ, np.zeros(3)), EZ)

    def test_quarter_great_circle(self):
        out = exp_map(EZ, (np.pi / 2) * EX)
        assert np.allclose(out, EX, atol=1e-12)

    def test_antipode(self):
        out = exp_map(EZ, np.pi * EX)
        assert np.allclose(out, -EZ, atol=1e-12)

    def test_norm_preserved_for_huge_steps(self, rng):
        x = unit(rng, 200)
        v = tangent_project(x, rng.normal(size=(200, 3)))
        v *= (10 * np.pi) / np.linalg.norm(v, axis=1, keepdims=True)
        out = exp_map(x, v)
        assert np.abs(np.linalg.norm(out, axis=1) - 1).max() <= 1e-9


class TestLogMap:
    def test_same_point_zero(self):
        assert np.allclose(log_map(EZ, EZ), 0.0)

    def test_inverse_of_exp_example(self):
        v = log_map(EZ, EX)
        assert np.allclose(v, (np.pi / 2) * EX, atol=1e-12)

    def test_antipodal_raises(self):
        with pytest.raises(AntipodalError):
            log_map(EZ, -EZ)

    def test_round_trip(self, rng):
        x = unit(rng, 300)
        y = unit(rng, 300)
        keep = np.sum(x * y, axis=1) > -0.999
        x, y = x[keep], y[keep]
        back = exp_map(x, log_map(x, y))
        assert np.linalg.norm(back - y, axis=1).max() <= 1e-9

    def test_norm_equals_angle(self, rng):
        x = unit(rng, 100)
        y = unit(rng, 100)
        v = log_map(x, y)
        assert np.allclose(np.linalg.norm(v, axis=1), geodesic_angle(x, y),
                           atol=1e-12)


class TestGeodesicAngle:
    def test_basics(self):
        assert geodesic_angle(EZ, EZ) == 0.0
        assert np.isclose(geodesic_angle(EZ, EX), np.pi / 2)
        assert np.isclose(geodesic_angle(EZ, -EZ), np.pi)

    def test_rotation_isometry(self, rng):
        from scipy.spatial.transform import Rotation

        x = unit(rng, 100)
        y = unit(rng, 100)
        r = Rotation.random(random_state=3).as_matrix()
        assert np.abs(geodesic_angle(x @ r.T, y @ r.T)
                      - geodesic_angle(x, y)).max() <= 1e-12


@given(st.integers(0, 2 ** 32 - 1))
def test_tangent_frame_orthonormal(seed):
    rng = np.random.default_rng(seed)
    p = normalize(rng.normal(size=(4, 3)))
    e1, e2 = tangent_frame(p)
    for e in (e1, e2):
        assert np.allclose(np.linalg.norm(e, axis=1), 1, atol=1e-12)
        assert np.abs(np.sum(e * p, axis=1)).max() <= 1e-12
    assert np.abs(np.sum(e1 * e2, axis=1)).max() <= 1e-12


def test_tangent_frame_at_poles():
    for p in ([0, 0, 1.0], [0, 0, -1.0], [1.0, 0, 0]):
        e1, e2 = tangent_frame(np.array([p]))
        assert np.isfinite(e1).all() and np.isfinite(e2).all()
