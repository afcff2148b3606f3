import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cubext.dyadic_geometry import (
    BoxDomain,
    CubeId,
    DualSkeleton,
    DyadicDecomposition,
    FaceId,
    FullDomain,
    GeometryError,
    Orientation,
    build_decomposition,
    cubes_over_domain,
    enclosing_boundary,
    faces,
    in_tent,
    upper_boundary,
    validate_descending,
)
from cubext.singular_complex import _face_box


def test_zero_shift_cubes():
    D = build_decomposition(2, None, (0, 2))
    lo, hi = D.cube_box(CubeId(1, (3,)))
    assert lo.tolist() == [6.0, 2.0] and hi.tolist() == [8.0, 4.0]


def test_admissible_increment_shifts_level():
    D = build_decomposition(2, {1: (1.0,)}, (0, 2))
    lo, _ = D.cube_box(CubeId(1, (0,)))
    assert lo[0] == 1.0


def test_rejects_increment_off_lattice():
    with pytest.raises(GeometryError):
        build_decomposition(2, {1: (0.5,)}, (0, 2))


def test_serialization_round_trip():
    D = build_decomposition(3, {0: (0.5, -1.0), 1: (2.0, 0.0)}, (-1, 2))
    assert DyadicDecomposition.from_json(D.to_json()) == D


def test_full_domain_takes_every_cube_in_bounds():
    D = build_decomposition(2, None, (-1, 0))
    cubes = cubes_over_domain(D, FullDomain(1), bounds=([-2.0], [2.0]))
    assert len([c for c in cubes if c.level == 0]) == 4
    assert len([c for c in cubes if c.level == -1]) == 8


def test_tent_membership_examples():
    D = build_decomposition(2, None, (0, 0))
    cubes = cubes_over_domain(D, BoxDomain([-4.0], [4.0]))
    assert CubeId(0, (0,)) in cubes
    assert CubeId(0, (3,)) not in cubes


def test_tent_cubes_match_brute_force():
    D = build_decomposition(2, {-1: (0.5,)}, (-2, 0))
    dom = BoxDomain([-1.0], [1.5])
    cubes = cubes_over_domain(D, dom)
    t = np.linspace(0, 1, 9)
    for k in D.levels():
        s = 2.0 ** k
        for z in range(int(-4 / s), int(4 / s)):
            c = CubeId(k, (z,))
            lo, hi = D.cube_box(c)
            pts = np.array([[lo[0] + a * s, lo[1] + b * s] for a in t for b in t])
            inside = bool(np.all(in_tent(dom, pts)))
            assert inside == (c in cubes), c


def test_flatter_tent_is_covered():
    # points of the smaller and flatter tent lie in the union of tent cubes
    m = 2
    kappa = 2 * (1 + math.sqrt(m - 1))
    D = build_decomposition(m, None, (-6, 0))
    dom = BoxDomain([-1.0], [1.0])
    cubes = cubes_over_domain(D, dom)
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, 4000), rng.uniform(2.0 ** -6, 2.0, 4000)])
    flat = np.abs(pts[:, 0]) + kappa * pts[:, 1] < 1.0
    for x in pts[flat]:
        assert any(c in cubes for c in D.cubes_containing(x)), x


def test_face_counts_single_square():
    D = build_decomposition(2, None, (0, 0))
    c = [CubeId(0, (0,))]
    assert len(faces(D, c, 1, Orientation.VERTICAL)) == 2
    assert len(faces(D, c, 0, Orientation.TOP)) == 2


def _brute_vertical_two_faces(lo, hi):
    # axis-aligned 2-dim faces of a 3-cube that contain a vertical segment
    out = set()
    for i in range(2):
        for side in (lo[i], hi[i]):
            out.add((i, side))
    return out


def test_vertical_two_faces_of_a_cube():
    D = build_decomposition(3, None, (0, 0))
    c = CubeId(0, (0, 0))
    lo, hi = D.cube_box(c)
    got = faces(D, [c], 2, Orientation.VERTICAL)
    assert len(got) == len(_brute_vertical_two_faces(lo, hi)) == 4


def test_shared_edge_listed_once():
    D = build_decomposition(2, None, (0, 0))
    got = faces(D, [CubeId(0, (0,)), CubeId(0, (1,))], 1, Orientation.VERTICAL)
    assert len(got) == 3


def test_invalid_face_request():
    D = build_decomposition(2, None, (0, 0))
    with pytest.raises(GeometryError):
        faces(D, [CubeId(0, (0,))], 0, Orientation.VERTICAL)
    with pytest.raises(GeometryError):
        faces(D, [CubeId(0, (0,))], 2, Orientation.TOP)


def test_boundaries_of_a_vertical_edge():
    D = build_decomposition(2, None, (-1, 1))
    sigma = FaceId(0, Orientation.VERTICAL, (3,), ())
    top = upper_boundary(sigma)
    assert D.face_box(top)[0].tolist() == [3.0, 2.0]
    enc = enclosing_boundary(D, sigma)
    assert len(enc) == 1
    (b,) = enc
    assert D.face_box(b)[0].tolist() == [3.0, 1.0]


def test_enclosing_boundary_of_vertical_two_face():
    D = build_decomposition(3, None, (-1, 1))
    sigma = FaceId(0, Orientation.VERTICAL, (0, 0), (0,))
    enc = enclosing_boundary(D, sigma)
    vertical = [f for f in enc if f.orientation is Orientation.VERTICAL]
    bottom = [f for f in enc if f.orientation is Orientation.TOP]
    assert len(vertical) == 2 and all(f.dim == 1 for f in vertical)
    # the bottom is tiled by finer top edges whose total length is the face width
    assert sum(np.prod((lambda b: b[1] - b[0])(D.face_box(f))[[0]]) for f in bottom) == 1.0
    assert upper_boundary(sigma).orientation is Orientation.TOP
    with pytest.raises(GeometryError):
        upper_boundary(upper_boundary(sigma))


def test_dual_skeleton_centre_and_corner():
    D = build_decomposition(2, None, (-1, 1))
    c = CubeId(0, (0,))
    L = DualSkeleton(D, 0, [c])
    assert L.distance(D.cube_center(c)) == pytest.approx(0.0, abs=1e-12)
    assert L.distance(np.array([0.0, 1.0])) == pytest.approx(math.sqrt(0.5 ** 2 + 0.5 ** 2))
    assert DualSkeleton(D, -1, [c]).distance(np.array([0.3, 1.2])) == math.inf


def test_dual_one_skeleton_matches_sampled_segments():
    # in m=2 the dual 1-skeleton of a cube joins its centre to the centres of its edges
    D = build_decomposition(2, None, (-1, 1))
    c = CubeId(0, (0,))
    L = DualSkeleton(D, 1, [c])
    ctr = np.array([0.5, 1.5])
    ends = [np.array([0.0, 1.5]), np.array([1.0, 1.5]), np.array([0.5, 2.0]),
            np.array([0.25, 1.0]), np.array([0.75, 1.0])]
    t = np.linspace(0, 1, 4001)[:, None]
    samples = np.concatenate([ctr + t * (e - ctr) for e in ends])
    rng = np.random.default_rng(3)
    for x in np.column_stack([rng.uniform(0, 1, 30), rng.uniform(1, 2, 30)]):
        brute = float(np.min(np.linalg.norm(samples - x, axis=1)))
        assert L.distance(x) == pytest.approx(brute, abs=2e-4)


def test_validate_descending_examples():
    D = build_decomposition(2, None, (-2, 1))
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(-2, 2, 200), rng.uniform(0.25, 4, 200)])
    assert validate_descending(lambda x: x, D, pts)
    assert validate_descending(lambda x: np.array([x[0], x[1] / 2]), D, pts)

    def shove(x):
        return np.array([x[0] + D.edge(D.locate(x)), x[1]])

    rep = validate_descending(shove, D, pts)
    assert not rep and rep.violation is not None


@given(st.integers(-3, 3), st.integers(-4, 4), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_edge_equals_height_and_tiling(k, z, a, b):
    D = build_decomposition(2, {kk: (float(kk % 2) * 2.0 ** (kk - 1),) for kk in range(-3, 4)}, (-3, 3))
    c = CubeId(k, (z,))
    lo, hi = D.cube_box(c)
    assert D.edge(c) == lo[-1]
    x = lo + np.array([a, b]) * (hi - lo)
    assert D.cubes_containing(x) == [c]


@given(st.integers(-3, 3), st.lists(st.integers(-2, 2), min_size=2, max_size=2), st.integers(-3, 3), st.integers(-3, 3))
def test_refinement_partitions_the_bottom(k, incs, z0, z1):
    D = build_decomposition(3, {k: tuple(float(v) * 2.0 ** (k - 1) for v in incs)}, (-4, 4))
    c = CubeId(k, (z0, z1))
    lo, hi = D.cube_box(c)
    base = D.bottom_lattice(k, c.lattice)
    tiles = [CubeId(k - 1, (base[0] + i, base[1] + j)) for i in (0, 1) for j in (0, 1)]
    area = 0.0
    for t in tiles:
        tlo, thi = D.cube_box(t)
        assert thi[-1] == lo[-1]
        assert np.all(tlo[:-1] >= lo[:-1]) and np.all(thi[:-1] <= hi[:-1])
        area += float(np.prod(thi[:-1] - tlo[:-1]))
    assert area == float(np.prod(hi[:-1] - lo[:-1]))


def _vertical_faces_near(m, level, ell, radius=2):
    out = []
    for axes in itertools.combinations(range(m - 1), ell - 1):
        for v in itertools.product(range(-radius, radius + 1), repeat=m - 1):
            out.append((tuple(v), axes))
    return out


def _box_in(inner, outer, tol=1e-12):
    return bool(np.all(inner[0] >= outer[0] - tol) and np.all(inner[1] <= outer[1] + tol))


@pytest.mark.parametrize("m", [2, 3])
def test_adjacent_face_exists_exhaustive(m):
    """If the top of a finer vertical face sits in a coarser vertical ell-face,
    some finer vertical ell-face containing it is adjacent to that coarse face."""
    for offset in itertools.product((0, 1), repeat=m - 1):
        D = DyadicDecomposition(m, -1, 0, {0: tuple(o * 0.5 for o in offset)})
        for ell in range(1, m + 1):
            coarse = [(_face_box(D, 0, v, ax, False), (v, ax)) for v, ax in _vertical_faces_near(m, 0, ell, 1)]
            fine_ell = [_face_box(D, -1, v, ax, False) for v, ax in _vertical_faces_near(m, -1, ell, 3)]
            for j in range(1, ell + 1):
                for v, ax in _vertical_faces_near(m, -1, j, 3):
                    sig = _face_box(D, -1, v, ax, False)
                    top = (np.append(sig[0][:-1], sig[1][-1]), sig[1])
                    for tau, _ in coarse:
                        if not _box_in(top, tau):
                            continue
                        ok = False
                        for rho in fine_ell:
                            rtop = (np.append(rho[0][:-1], rho[1][-1]), rho[1])
                            if _box_in(sig, rho) and _box_in(rtop, tau):
                                ok = True
                                break
                        assert ok, (m, offset, ell, j, v, ax)
