import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cubext.targets import ProjectionOutOfRange, circle, geodesic_distance, project, sphere


def test_radial_projection_of_far_point():
    assert project(circle(delta=1.0), [2.0, 0.0]).tolist() == [1.0, 0.0]


def test_centre_is_rejected():
    with pytest.raises(ProjectionOutOfRange):
        project(circle(delta=1.0), [0.0, 0.0])


def test_outside_collar_is_rejected():
    with pytest.raises(ProjectionOutOfRange) as err:
        project(circle(), [2.0, 0.0])
    assert err.value.code == "PROJECTION_OUT_OF_RANGE"


def test_sphere_normalization():
    y = 1.3 * np.array([0.6, 0.0, 0.8])
    assert np.allclose(project(sphere(2), y), [0.6, 0.0, 0.8])


def test_bad_radius():
    with pytest.raises(ValueError):
        circle(delta=1.5)


def test_geodesic_examples():
    S1 = circle()
    assert geodesic_distance(S1, [1.0, 0.0], [1.0, 0.0]) == 0.0
    assert geodesic_distance(S1, [1.0, 0.0], [-1.0, 0.0]) == pytest.approx(math.pi)


def test_homotopy_table():
    assert not circle().homotopy_trivial(1)
    assert circle().homotopy_trivial(2)
    assert sphere(2).homotopy_trivial(1)
    assert not sphere(2).homotopy_trivial(2)


unit = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1)


def _u(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


@given(unit, unit, unit)
def test_geodesic_metric_properties(a, b, c):
    M = sphere(2)
    a, b, c = _u(a), _u(b), _u(c)
    dab = float(geodesic_distance(M, a, b))
    assert dab == pytest.approx(float(geodesic_distance(M, b, a)))
    chord = float(np.linalg.norm(a - b))
    assert chord <= dab + 1e-12
    assert dab <= math.pi / 2 * chord + 1e-12
    assert dab <= float(geodesic_distance(M, a, c) + geodesic_distance(M, c, b)) + 1e-9


@given(unit, st.floats(0.55, 1.45))
def test_projection_idempotent_and_error(v, r):
    M = sphere(2)
    y = r * _u(v)
    p = project(M, y)
    assert np.allclose(project(M, p), p)
    assert np.linalg.norm(p - y) == pytest.approx(abs(1 - np.linalg.norm(y)))


@given(unit, unit, st.floats(0.6, 1.4), st.floats(0.6, 1.4))
def test_projection_lipschitz_on_collar(a, b, ra, rb):
    M = sphere(2)
    y, z = ra * _u(a), rb * _u(b)
    lhs = float(geodesic_distance(M, project(M, y), project(M, z)))
    assert lhs <= (math.pi / 2) / (1 - M.delta) * np.linalg.norm(y - z) + 1e-12


@given(unit, st.floats(0.6, 1.4), unit)
def test_projection_derivative_bound(v, r, d):
    M = sphere(2)
    y = r * _u(v)
    e = 1e-6 * _u(d)
    fd = np.linalg.norm(project(M, y + e) - project(M, y - e)) / (2e-6)
    assert fd <= 1 / (1 - M.delta) + 1e-6
