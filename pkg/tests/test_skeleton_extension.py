import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from cubext.boundary_data import constant_map, smooth_circle_map, smooth_sphere_map
from cubext.dyadic_geometry import CubeId, build_decomposition
from cubext.linear_extension import extension_eval
from cubext.skeleton_extension import (
    ConeFill,
    LiftedConeFill,
    NoFill,
    PipelineConfig,
    StereoFill,
    assemble_subcritical,
    assemble_supercritical,
    boundary_grid,
    energy,
    energy_by_cube,
    face_fill_constructive,
    homogeneous_extend,
    lipschitz_number,
    skeleton_extend,
    trace_defect,
)
from cubext.targets import circle, sphere


def winding_on_square(Y):
    Y = np.atleast_2d(Y)
    return Y / np.linalg.norm(Y, axis=1, keepdims=True)


# ------------------------------------------------------------------ fills
def test_constant_fill():
    G = face_fill_constructive(lambda Y: np.tile([0.0, 0.0, 1.0], (len(Y), 1)), 2, sphere(2))
    Z = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    assert np.allclose(G(Z), [0.0, 0.0, 1.0])


def test_homogeneous_constant():
    F = homogeneous_extend(lambda Y: np.tile([1.0, 0.0], (len(Y), 1)), 3)
    Z = np.random.default_rng(1).uniform(-1, 1, (20, 3))
    assert np.allclose(F(Z), [1.0, 0.0])


def _boundary_lipschitz(f, j, s=201):
    # largest tangential difference quotient over the facets
    Y = boundary_grid(j, s)
    best = 0.0
    h = 2.0 / (s - 1)
    for i in range(j):
        e = np.zeros(j)
        e[i] = h
        Yp, Ym = Y + e, Y - e
        ok = (np.max(np.abs(Yp), axis=1) <= 1 + 1e-12) & (np.max(np.abs(Ym), axis=1) <= 1 + 1e-12)
        ok &= np.isclose(np.max(np.abs(Yp), axis=1), 1) & np.isclose(np.max(np.abs(Ym), axis=1), 1)
        d = np.linalg.norm(f(Yp[ok]) - f(Ym[ok]), axis=1) / (2 * h)
        best = max(best, float(d.max()))
    return best


def test_homogeneous_lipschitz_bound_winding():
    F = homogeneous_extend(winding_on_square, 2)
    rng = np.random.default_rng(2)
    Z = rng.uniform(-1, 1, (4000, 2))
    Z = Z[np.max(np.abs(Z), axis=1) > 0.02]
    lip = lipschitz_number(F, Z, 1e-7)
    lhs = float(np.max(np.linalg.norm(Z, axis=1) * lip))
    assert lhs / _boundary_lipschitz(winding_on_square, 2) <= 2 * 1.05


@given(st.floats(0.1, 10.0))
def test_homogeneous_bound_is_scale_invariant(lam):
    F = homogeneous_extend(winding_on_square, 2)
    Fl = lambda X: F(np.atleast_2d(X) / lam)
    Z = np.array([[0.3, 0.1], [-0.5, 0.7], [0.05, -0.9]])
    a = np.linalg.norm(Z, axis=1) * lipschitz_number(F, Z, 1e-7)
    b = np.linalg.norm(lam * Z, axis=1) * lipschitz_number(Fl, lam * Z, lam * 1e-7)
    assert np.allclose(a, b, rtol=1e-5)


def test_winding_loop_has_no_fill():
    with pytest.raises(NoFill) as err:
        face_fill_constructive(winding_on_square, 2, circle())
    assert err.value.report["code"] == "NO_FILL"
    assert err.value.report["winding"] == 1


def test_zero_winding_loop_is_filled():
    f = lambda Y: winding_on_square(np.column_stack([np.ones(len(Y)) * 3.0, np.atleast_2d(Y)[:, 1]]))
    G = face_fill_constructive(f, 2, circle())
    assert isinstance(G.fill, (ConeFill, LiftedConeFill))
    Y = boundary_grid(2, 9)
    assert np.allclose(G(Y), f(Y))


def test_small_circle_on_sphere_is_projected_cone():
    a = 0.3

    def f(Y):
        ang = np.arctan2(Y[:, 1], Y[:, 0])
        return np.column_stack([a * np.cos(ang), a * np.sin(ang), np.full(len(Y), math.sqrt(1 - a * a))])

    G = face_fill_constructive(f, 2, sphere(2))
    assert isinstance(G.fill, ConeFill)
    Z = np.random.default_rng(4).uniform(-1, 1, (300, 2))
    assert np.allclose(np.linalg.norm(G(Z), axis=1), 1.0)
    assert np.all(np.isfinite(lipschitz_number(G, Z[np.max(np.abs(Z), axis=1) > 0.01], 1e-7)))


def test_equator_on_sphere_uses_stereographic_fill():
    f = lambda Y: np.column_stack([winding_on_square(Y), np.zeros(len(Y))])
    G = face_fill_constructive(f, 2, sphere(2))
    assert isinstance(G.fill, StereoFill)
    Y = boundary_grid(2, 9)
    assert np.allclose(G(Y), f(Y))
    # continuity up to the boundary
    Z = 0.999999 * Y
    assert np.max(np.linalg.norm(G(Z) - f(Y), axis=1)) < 1e-4
    assert np.allclose(np.linalg.norm(G(np.random.default_rng(0).uniform(-1, 1, (100, 2))), axis=1), 1)


def test_edge_fill_is_geodesic():
    G = face_fill_constructive(lambda Y: np.where(Y < 0, [[1.0, 0.0]], [[0.0, 1.0]]), 1, circle())
    mid = G(np.array([[0.0]]))[0]
    assert np.allclose(mid, [math.sqrt(0.5), math.sqrt(0.5)])


# ------------------------------------------------------------- one singular cube
CENTRE = np.array([0.5, 1.5])


def _winding_field(X):
    X = np.atleast_2d(X) - CENTRE
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def _single_cube_field():
    D = build_decomposition(2, None, (-1, 1))
    region = {CubeId(0, (-1,)), CubeId(0, (0,)), CubeId(0, (1,)), CubeId(1, (-1,)), CubeId(1, (0,))}
    region |= {CubeId(-1, (i,)) for i in range(-1, 3)}
    return skeleton_extend(D, region, {CubeId(0, (0,))}, circle(), _winding_field, 1, 1.5)


def test_single_singular_cube_lipschitz_ledger():
    U = _single_cube_field()
    rng = np.random.default_rng(6)
    X = CENTRE + rng.uniform(-0.49, 0.49, (2000, 2))
    d = np.linalg.norm(X - CENTRE, axis=1)
    X, d = X[d > 1e-3], d[d > 1e-3]
    beta = 0.5 * _boundary_lipschitz(lambda Y: _winding_field(CENTRE + 0.5 * Y), 2) / 0.5
    assert float(np.max(d * lipschitz_number(U, X, 1e-7))) <= 2 * 1.05 * beta
    L = U.dual_skeleton()
    assert L.distance(CENTRE) == pytest.approx(0.0, abs=1e-12)


def _polar_energy(U, p, half=0.5, nodes=48):
    # |DU|^p r dr dphi with s = r^{2-p} so the radial integrand is smooth
    gs, gw = np.polynomial.legendre.leggauss(nodes)
    total = 0.0
    for a, b in [(k * math.pi / 4, (k + 1) * math.pi / 4) for k in range(8)]:
        ph = 0.5 * (b - a) * gs + 0.5 * (a + b)
        wph = 0.5 * (b - a) * gw
        R = half / np.maximum(np.abs(np.cos(ph)), np.abs(np.sin(ph)))
        for phi, wp, Rm in zip(ph, wph, R):
            smax = Rm ** (2 - p)
            s = 0.5 * smax * (gs + 1)
            r = s ** (1 / (2 - p))
            X = CENTRE + np.column_stack([r * math.cos(phi), r * math.sin(phi)])
            g = lipschitz_number(U, X, 1e-6 * r)
            # Frobenius and spectral norms agree for this rank-one gradient
            total += wp * float(np.sum(0.5 * smax * gw * g ** p * r ** p)) / (2 - p)
    return total


def test_single_cube_energy_matches_polar_quadrature():
    U = _single_cube_field()
    e = energy_by_cube(U, 1.5, [CubeId(0, (0,))])[CubeId(0, (0,))]
    assert e == pytest.approx(_polar_energy(U, 1.5), rel=0.02)


def test_winding_cone_closed_form():
    p = 1.5
    F = homogeneous_extend(winding_on_square, 2)
    exact = 8 / (2 - p) * integrate.quad(lambda t: math.cos(t) ** (p - 2), 0, math.pi / 4)[0]
    # closed form on [-1,1]^2; the field on the unit cube is a half-scale copy
    U = _single_cube_field()
    e = energy_by_cube(U, p, [CubeId(0, (0,))])[CubeId(0, (0,))]
    assert e == pytest.approx(0.5 ** (2 - p) * exact, rel=0.02)
    assert exact > 0 and callable(F)


def test_no_singular_cubes_means_w():
    D = build_decomposition(2, None, (-2, -1))
    region = {CubeId(-2, (0,)), CubeId(-1, (0,))}
    U = skeleton_extend(D, region, set(), circle(), _winding_field, 1, 1.5)
    X = np.array([[0.1, 0.3], [0.2, 0.7]])
    assert np.array_equal(U(X), _winding_field(X))


def test_dimension_guards():
    D = build_decomposition(3, None, (-2, -1))
    with pytest.raises(ValueError):
        skeleton_extend(D, set(), set(), circle(), _winding_field, 1, 2.5)
    U = _single_cube_field()
    with pytest.raises(ValueError):
        energy(U, 2.0)


# ------------------------------------------------------------------ energy
def test_affine_energy():
    D = build_decomposition(3, None, (0, 0))
    s = np.array([0.3, -1.2, 0.5])
    f = lambda X: np.atleast_2d(X) @ np.column_stack([s, 2 * s]) * np.array([1.0, 0.0])
    e = energy(f, 1.7, region=[CubeId(0, (0, 0))], D=D)
    assert e == pytest.approx(np.linalg.norm(s) ** 1.7, rel=1e-6)


def test_constant_energy():
    D = build_decomposition(2, None, (-1, 0))
    f = lambda X: np.tile([1.0, 0.0], (len(np.atleast_2d(X)), 1))
    assert energy(f, 2.0, region=[CubeId(-1, (0,)), CubeId(0, (0,))], D=D) == 0.0


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_energy_additive_and_translation_invariant(a, b):
    D = build_decomposition(2, None, (-1, 0))
    f = lambda X: np.column_stack([np.sin(np.atleast_2d(X) @ [a, b]), np.cos(np.atleast_2d(X) @ [a, b])])
    A, B = [CubeId(-1, (0,))], [CubeId(-1, (1,)), CubeId(0, (3,))]
    whole = energy(f, 1.5, region=A + B, D=D)
    assert whole == pytest.approx(energy(f, 1.5, region=A, D=D) + energy(f, 1.5, region=B, D=D), rel=1e-12)
    g = lambda X: f(np.atleast_2d(X) - [1.0, 0.0])
    assert energy(g, 1.5, region=[CubeId(0, (1,))], D=D) == pytest.approx(
        energy(f, 1.5, region=[CubeId(0, (0,))], D=D), rel=1e-6)


@pytest.mark.parametrize("lam_exp", [-1, 1])
def test_energy_scale_equivariance(lam_exp):
    lam = 2.0 ** lam_exp
    m, p = 2, 1.5
    D = build_decomposition(2, None, (-2, 2))
    f = lambda X: np.column_stack([np.cos(np.atleast_2d(X)[:, 0] * 3), np.sin(np.atleast_2d(X)[:, 0] * 3)])
    fl = lambda X: f(np.atleast_2d(X) / lam)
    base = energy(f, p, region=[CubeId(0, (0,))], D=D)
    scaled = energy(fl, p, region=[CubeId(lam_exp, (0,))], D=D)
    assert scaled == pytest.approx(lam ** (m - p) * base, rel=1e-6)


# ------------------------------------------------------------------ pipelines
def test_constant_pipelines():
    u = constant_map(circle(), 2, 64)
    U = assemble_subcritical(u, 1.5, PipelineConfig(level_range=(-4, -1)))
    assert U.sing == set()
    assert energy(U, 1.5) == 0.0
    v = constant_map(sphere(2), 2, 64)
    V = assemble_supercritical(v, 3.0, PipelineConfig(level_range=(-4, -1)))
    assert energy(V, 3.0) == 0.0
    X = np.array([[0.0, 0.3], [0.1, 0.2]])
    assert np.allclose(V(X), [1.0, 0.0, 0.0])


def test_trace_defect_empty_for_good_data():
    u = smooth_circle_map(2, 128, seed=3, amplitude=0.5)
    U = assemble_subcritical(u, 1.5, PipelineConfig(level_range=(-5, -1)))
    assert U.sing == set()
    td = trace_defect(U, u, [2.0 ** -j for j in range(2, 5)], 1.5)
    assert td.measure == [0.0, 0.0, 0.0]
    assert all(b < a for a, b in zip(td.lp_distance, td.lp_distance[1:]))


def test_supercritical_ratio_stable_across_resolutions():
    from cubext.boundary_data import gagliardo_seminorm

    ratios = []
    for n in (64, 128, 256):
        u = smooth_sphere_map(sphere(2), 2, n, seed=1)
        U = assemble_supercritical(u, 3.0, PipelineConfig(level_range=(-5, -1)))
        ratios.append(energy(U, 3.0) / gagliardo_seminorm(u, 3.0).value)
    assert max(ratios) <= 2 * min(ratios)
    assert all(math.isfinite(r) and r > 0 for r in ratios)


def test_regular_part_is_projected_extension():
    u = smooth_circle_map(2, 128, seed=5)
    U = assemble_subcritical(u, 1.5, PipelineConfig(level_range=(-5, -1)))
    X = np.array([[0.0, 0.3], [0.2, 0.1]])
    assert U.regular_mask(X).all()
    assert np.allclose(U(X), u.target.project(extension_eval(u, None, X)))
