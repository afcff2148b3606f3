"""Shifted dyadic (Whitney-type) decompositions of the upper half-space.

A level-k cube is ``(xi_k + 2^k zeta + [0, 2^k]^{m-1}) x [2^k, 2^{k+1}]`` with
``zeta`` an integer lattice vector.  Faces are addressed symbolically by a
lattice vertex plus the set of horizontal axes along which they extend.
"""
from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    """Invalid decomposition data or face request."""


class Orientation(enum.Enum):
    TOP = "TOP"
    VERTICAL = "VERTICAL"


@dataclass(frozen=True, order=True)
class CubeId:
    level: int
    lattice: tuple[int, ...]


@dataclass(frozen=True, order=True)
class FaceId:
    """A face of the cubical complex.

    ``axes`` are the horizontal directions along which the face extends.  A
    TOP face sits in ``{x_m = 2^{level+1}}``; a VERTICAL face additionally
    spans ``[2^level, 2^{level+1}]`` in the last coordinate.
    """

    level: int
    orientation: Orientation
    vertex: tuple[int, ...]
    axes: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.axes) + (1 if self.orientation is Orientation.VERTICAL else 0)


def _is_integer(v: float) -> bool:
    return math.isfinite(v) and float(v) == math.floor(v)


def lattice_position(v: float) -> tuple[int, bool]:
    """(cell index, on a lattice hyperplane) with a relative snap of 1e-9."""
    n = round(v)
    if abs(v - n) <= 1e-9 * max(1.0, abs(v)):
        return int(n), True
    return int(math.floor(v)), False


def level_of_height(t: float) -> int:
    """Level k with 2^k <= t < 2^{k+1} (exact for floats)."""
    if not t > 0:
        raise GeometryError(f"height must be positive, got {t}")
    mant, exp = math.frexp(t)  # t = mant * 2**exp, 0.5 <= mant < 1
    return exp - 1


def tent_kappa(m: int) -> float:
    """Aperture for which the flattened tent is covered by tent cubes."""
    return 2.0 * (1.0 + math.sqrt(m - 1))


class DyadicDecomposition:
    """Shifted dyadic decomposition with a finite range of active levels.

    Shifts are accumulated from per-level increments starting from
    ``xi_{k_min-1} = origin`` (zero unless a global translate is requested);
    below ``k_min`` the shift equals the origin and above ``k_max`` it stays
    constant, so the refinement condition holds at every level.
    """

    def __init__(
        self,
        m: int,
        k_min: int,
        k_max: int,
        increments: dict[int, Sequence[float]] | None = None,
        origin: Sequence[float] | None = None,
    ):
        if m < 2:
            raise GeometryError("dimension m must be at least 2")
        if k_min > k_max:
            raise GeometryError("empty level range")
        self.m = int(m)
        self.k_min = int(k_min)
        self.k_max = int(k_max)
        incs: dict[int, tuple[float, ...]] = {}
        for k in range(self.k_min, self.k_max + 1):
            inc = tuple(float(c) for c in (increments or {}).get(k, (0.0,) * (m - 1)))
            if len(inc) != m - 1:
                raise GeometryError(f"increment at level {k} must have {m - 1} entries")
            unit = 2.0 ** (k - 1)
            for c in inc:
                if not _is_integer(c / unit):
                    raise GeometryError(
                        f"increment {inc} at level {k} is not in 2^{k - 1} Z^{m - 1}"
                    )
            incs[k] = inc
        self.increments = incs
        # a global translation keeps the refinement condition intact
        self.origin = np.zeros(m - 1) if origin is None else np.asarray(origin, dtype=float).copy()
        if self.origin.shape != (m - 1,):
            raise GeometryError("origin must have m-1 entries")
        self.origin.setflags(write=False)
        xi = self.origin.copy()
        self._shifts: dict[int, np.ndarray] = {}
        for k in range(self.k_min, self.k_max + 1):
            xi = xi + np.asarray(incs[k])
            self._shifts[k] = xi.copy()
            self._shifts[k].setflags(write=False)

    # ------------------------------------------------------------------ shifts
    @property
    def dim(self) -> int:
        return self.m

    def levels(self) -> range:
        return range(self.k_min, self.k_max + 1)

    def shift(self, k: int) -> np.ndarray:
        if k < self.k_min:
            return self.origin
        if k > self.k_max:
            return self._shifts[self.k_max]
        return self._shifts[k]

    def relative_offset(self, k: int) -> tuple[int, ...]:
        """Integer vector (xi_k - xi_{k-1}) / 2^{k-1}."""
        d = (self.shift(k) - self.shift(k - 1)) / 2.0 ** (k - 1)
        return tuple(int(round(v)) for v in d)

    def with_increments(self, increments: dict[int, Sequence[float]]) -> "DyadicDecomposition":
        return DyadicDecomposition(self.m, self.k_min, self.k_max, increments, self.origin)

    def translated(self, origin: Sequence[float]) -> "DyadicDecomposition":
        return DyadicDecomposition(self.m, self.k_min, self.k_max, self.increments, origin)

    # ------------------------------------------------------------------- cubes
    def edge(self, c: CubeId) -> float:
        return 2.0 ** c.level

    def cube_box(self, c: CubeId) -> tuple[np.ndarray, np.ndarray]:
        s = 2.0 ** c.level
        lo = self.shift(c.level) + s * np.asarray(c.lattice, dtype=float)
        lo = np.append(lo, s)
        hi = lo + s
        return lo, hi

    def cube_center(self, c: CubeId) -> np.ndarray:
        lo, hi = self.cube_box(c)
        return 0.5 * (lo + hi)

    def locate(self, x) -> CubeId:
        """The cube containing x, using half-open cubes [lo, hi)."""
        x = np.asarray(x, dtype=float)
        k = level_of_height(float(x[-1]))
        s = 2.0 ** k
        zeta = np.floor((x[:-1] - self.shift(k)) / s).astype(int)
        return CubeId(k, tuple(int(z) for z in zeta))

    def cubes_containing(self, x, active_only: bool = True) -> list[CubeId]:
        """All closed cubes containing x."""
        x = np.asarray(x, dtype=float)
        t = float(x[-1])
        k = level_of_height(t)
        levels = [k]
        if t == 2.0 ** k:
            levels.append(k - 1)
        out = []
        for lev in levels:
            s = 2.0 ** lev
            r = (x[:-1] - self.shift(lev)) / s
            choices = []
            for v in r:
                f, on = lattice_position(v)
                choices.append((f - 1, f) if on else (f,))
            for zeta in itertools.product(*choices):
                if active_only and not (self.k_min <= lev <= self.k_max):
                    continue
                out.append(CubeId(lev, tuple(int(z) for z in zeta)))
        return sorted(out)

    def parent(self, c: CubeId) -> CubeId:
        """The level-(k+1) cube whose bottom contains the top of c."""
        d = self.relative_offset(c.level + 1)
        return CubeId(c.level + 1, tuple((z - di) // 2 for z, di in zip(c.lattice, d)))

    def children(self, c: CubeId) -> list[CubeId]:
        """Level-(k-1) cubes whose tops tile the bottom of c."""
        d = self.relative_offset(c.level)
        base = [2 * z + di for z, di in zip(c.lattice, d)]
        return [
            CubeId(c.level - 1, tuple(b + e for b, e in zip(base, eps)))
            for eps in itertools.product((0, 1), repeat=self.m - 1)
        ]

    # ------------------------------------------------------------------- faces
    def face_box(self, f: FaceId) -> tuple[np.ndarray, np.ndarray]:
        s = 2.0 ** f.level
        lo = self.shift(f.level) + s * np.asarray(f.vertex, dtype=float)
        hi = lo.copy()
        for i in f.axes:
            hi[i] += s
        if f.orientation is Orientation.TOP:
            lo = np.append(lo, 2 * s)
            hi = np.append(hi, 2 * s)
        else:
            lo = np.append(lo, s)
            hi = np.append(hi, 2 * s)
        return lo, hi

    def face_center(self, f: FaceId) -> np.ndarray:
        lo, hi = self.face_box(f)
        return 0.5 * (lo + hi)

    def bottom_lattice(self, level: int, vertex: Sequence[int]) -> tuple[int, ...]:
        """Level-(k-1) lattice index of the level-k lattice point ``vertex``."""
        d = self.relative_offset(level)
        return tuple(2 * v + di for v, di in zip(vertex, d))

    # ----------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "increments": {str(k): list(v) for k, v in self.increments.items()},
            "origin": self.origin.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DyadicDecomposition":
        incs = {int(k): tuple(v) for k, v in d.get("increments", {}).items()}
        return cls(int(d["m"]), int(d["k_min"]), int(d["k_max"]), incs, d.get("origin"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "DyadicDecomposition":
        return cls.from_dict(json.loads(s))

    def __eq__(self, other) -> bool:
        return isinstance(other, DyadicDecomposition) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.to_json())

    def __repr__(self) -> str:
        return f"DyadicDecomposition(m={self.m}, levels=[{self.k_min},{self.k_max}])"


def build_decomposition(m: int, shift_increments, level_range: tuple[int, int]) -> DyadicDecomposition:
    """Build a decomposition from per-level increments.

    ``shift_increments`` is either a mapping level -> vector or a sequence
    aligned with ``range(k_min, k_max + 1)``.
    """
    k_min, k_max = level_range
    if shift_increments is None:
        incs = {}
    elif isinstance(shift_increments, dict):
        incs = dict(shift_increments)
    else:
        seq = list(shift_increments)
        if len(seq) != k_max - k_min + 1:
            raise GeometryError("one increment per active level is required")
        incs = {k_min + i: v for i, v in enumerate(seq)}
    incs = {
        k: (tuple(v) if np.ndim(v) else (float(v),) * (m - 1)) for k, v in incs.items()
    }
    return DyadicDecomposition(m, k_min, k_max, incs)


# --------------------------------------------------------------------- domains
class Domain:
    """Open subset of R^{m-1} described by its closed-ball containment test."""

    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def contains_closed_ball(self, c, r) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x) -> np.ndarray:
        return self.contains_closed_ball(x, 0.0)

    def to_dict(self) -> dict:
        raise NotImplementedError


class BoxDomain(Domain):
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.bounds = (self.lo, self.hi)

    def contains_closed_ball(self, c, r):
        c = np.asarray(c, dtype=float)
        r = np.asarray(r, dtype=float)[..., None] if np.ndim(r) else r
        return np.all((c - r > self.lo) & (c + r < self.hi), axis=-1)

    def to_dict(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


class BallDomain(Domain):
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.bounds = (self.center - radius, self.center + radius)

    def contains_closed_ball(self, c, r):
        c = np.asarray(c, dtype=float)
        return np.linalg.norm(c - self.center, axis=-1) + r < self.radius

    def to_dict(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


class HalfPlaneDomain(Domain):
    """{y : <n, y> < offset} with n a unit normal."""

    def __init__(self, normal, offset, bounds=None):
        n = np.asarray(normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)
        self.bounds = None if bounds is None else tuple(np.asarray(b, dtype=float) for b in bounds)

    def contains_closed_ball(self, c, r):
        c = np.asarray(c, dtype=float)
        return c @ self.normal + r < self.offset

    def to_dict(self):
        return {"kind": "halfplane", "normal": self.normal.tolist(), "offset": self.offset}


class FullDomain(Domain):
    def __init__(self, dim: int):
        self.dim = dim

    def contains_closed_ball(self, c, r):
        c = np.asarray(c, dtype=float)
        return np.ones(c.shape[:-1], dtype=bool)

    def to_dict(self):
        return {"kind": "full", "dim": self.dim}


def domain_from_dict(d: dict) -> Domain:
    kind = d["kind"]
    if kind == "box":
        return BoxDomain(d["lo"], d["hi"])
    if kind == "ball":
        return BallDomain(d["center"], d["radius"])
    if kind == "halfplane":
        return HalfPlaneDomain(d["normal"], d["offset"])
    if kind == "full":
        return FullDomain(int(d["dim"]))
    raise GeometryError(f"unknown domain kind {kind!r}")


def in_tent(domain: Domain, x) -> np.ndarray:
    """Whether the closed horizontal ball of radius x_m around x' lies in the domain."""
    x = np.asarray(x, dtype=float)
    return domain.contains_closed_ball(x[..., :-1], x[..., -1])


def cube_in_tent(D: DyadicDecomposition, c: CubeId, domain: Domain) -> bool:
    # the tent over a convex domain is convex and shrinks with height, so the
    # top vertices decide
    lo, hi = D.cube_box(c)
    tops = np.array(
        [
            [lo[i] if b[i] == 0 else hi[i] for i in range(D.m - 1)] + [hi[-1]]
            for b in itertools.product((0, 1), repeat=D.m - 1)
        ]
    )
    return bool(np.all(in_tent(domain, tops)))


def cubes_over_domain(D: DyadicDecomposition, domain: Domain, bounds=None) -> set[CubeId]:
    """Active cubes contained in the tent over ``domain`` and inside ``bounds``."""
    if bounds is None:
        bounds = domain.bounds
    if bounds is None:
        raise GeometryError("an unbounded domain needs an explicit bounding box")
    blo, bhi = (np.asarray(b, dtype=float) for b in bounds)
    out: set[CubeId] = set()
    for k in D.levels():
        s = 2.0 ** k
        xi = D.shift(k)
        first = np.ceil((blo - xi) / s).astype(int)
        last = np.floor((bhi - xi) / s).astype(int) - 1
        if np.any(last < first):
            continue
        ranges = [range(a, b + 1) for a, b in zip(first, last)]
        lattice = np.array(list(itertools.product(*ranges)), dtype=float).reshape(-1, D.m - 1)
        lo = xi + s * lattice
        ok = np.ones(len(lattice), dtype=bool)
        for b in itertools.product((0, 1), repeat=D.m - 1):
            corner = lo + s * np.asarray(b, dtype=float)
            ok &= domain.contains_closed_ball(corner, 2 * s)
        for z in lattice[ok].astype(int):
            out.add(CubeId(k, tuple(int(v) for v in z)))
    return out


# ----------------------------------------------------------------------- faces
def cube_faces(c: CubeId, ell: int, orientation: Orientation, m: int) -> list[FaceId]:
    """Faces of a single cube at the cube's own level."""
    _check_face_request(ell, orientation, m)
    nfree = ell if orientation is Orientation.TOP else ell - 1
    out = []
    for axes in itertools.combinations(range(m - 1), nfree):
        fixed = [i for i in range(m - 1) if i not in axes]
        for bits in itertools.product((0, 1), repeat=len(fixed)):
            v = list(c.lattice)
            for i, b in zip(fixed, bits):
                v[i] += b
            out.append(FaceId(c.level, orientation, tuple(v), axes))
    return out


def _check_face_request(ell: int, orientation: Orientation, m: int) -> None:
    if not 0 <= ell <= m:
        raise GeometryError(f"face dimension {ell} outside [0, {m}]")
    if orientation is Orientation.VERTICAL and ell == 0:
        raise GeometryError("vertical faces have dimension at least 1")
    if orientation is Orientation.TOP and ell == m:
        raise GeometryError("top faces have dimension at most m-1")


def faces(D: DyadicDecomposition, cubes: Iterable[CubeId], ell: int, orientation: Orientation) -> set[FaceId]:
    out: set[FaceId] = set()
    for c in cubes:
        out.update(cube_faces(c, ell, orientation, D.m))
    return out


def upper_boundary(sigma: FaceId) -> FaceId:
    if sigma.orientation is not Orientation.VERTICAL:
        raise GeometryError("upper boundary is defined for vertical faces only")
    return FaceId(sigma.level, Orientation.TOP, sigma.vertex, sigma.axes)


def bottom_faces(D: DyadicDecomposition, sigma: FaceId) -> list[FaceId]:
    """Level-(k-1) top faces tiling the bottom of a vertical face."""
    w = D.bottom_lattice(sigma.level, sigma.vertex)
    out = []
    for bits in itertools.product((0, 1), repeat=len(sigma.axes)):
        v = list(w)
        for i, b in zip(sigma.axes, bits):
            v[i] += b
        out.append(FaceId(sigma.level - 1, Orientation.TOP, tuple(v), sigma.axes))
    return out


def side_faces(sigma: FaceId) -> list[FaceId]:
    """Vertical faces forming the lateral boundary of a vertical face."""
    out = []
    for i in sigma.axes:
        rest = tuple(a for a in sigma.axes if a != i)
        v2 = list(sigma.vertex)
        v2[i] += 1
        out.append(FaceId(sigma.level, Orientation.VERTICAL, sigma.vertex, rest))
        out.append(FaceId(sigma.level, Orientation.VERTICAL, tuple(v2), rest))
    return out


def enclosing_boundary(D: DyadicDecomposition, sigma: FaceId) -> set[FaceId]:
    if sigma.orientation is not Orientation.VERTICAL:
        raise GeometryError("enclosing boundary is defined for vertical faces only")
    return set(side_faces(sigma)) | set(bottom_faces(D, sigma))


def box_contains_box(outer, inner, tol: float = 0.0) -> bool:
    olo, ohi = outer
    ilo, ihi = inner
    return bool(np.all(ilo >= olo - tol) and np.all(ihi <= ohi + tol))


def box_distance(x, lo, hi) -> np.ndarray:
    """Euclidean distance from points x (..., m) to the box [lo, hi]."""
    x = np.asarray(x, dtype=float)
    d = np.maximum(np.maximum(lo - x, x - hi), 0.0)
    return np.sqrt(np.sum(d * d, axis=-1))


def smallest_face(D: DyadicDecomposition, x) -> FaceId | CubeId:
    """The smallest closed face (or cube) containing x.

    Points at height exactly 2^{k+1} belong to a level-k top face.
    """
    x = np.asarray(x, dtype=float)
    t = float(x[-1])
    k = level_of_height(t)
    top = t == 2.0 ** k
    if top:
        k -= 1
    s = 2.0 ** k
    r = (x[:-1] - D.shift(k)) / s
    vertex, axes = [], []
    for i, v in enumerate(r):
        f, on = lattice_position(v)
        vertex.append(f)
        if not on:
            axes.append(i)
    axes = tuple(axes)
    if top:
        return FaceId(k, Orientation.TOP, tuple(vertex), axes)
    if len(axes) == D.m - 1:
        return CubeId(k, tuple(vertex))
    return FaceId(k, Orientation.VERTICAL, tuple(vertex), axes)


def face_of_cube(c: CubeId) -> FaceId:
    """The cube as its own m-dimensional vertical face."""
    return FaceId(c.level, Orientation.VERTICAL, c.lattice, tuple(range(len(c.lattice))))


def cubes_containing_face(D: DyadicDecomposition, f: FaceId, active_only: bool = True) -> list[CubeId]:
    """Closed cubes (at any level) containing the whole face."""
    lo, hi = D.face_box(f)
    x = 0.5 * (lo + hi)
    return [c for c in D.cubes_containing(x, active_only) if box_contains_box(D.cube_box(c), (lo, hi))]


# -------------------------------------------------------------- dual skeleton
def _cube_complex_faces(D: DyadicDecomposition, c: CubeId) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """(dim, lo, hi) of every face lying in the closed cube c.

    Includes the cube, its own top and vertical faces, and the finer
    level-(k-1) top faces tiling its bottom.
    """
    m = D.m
    out = [(m, *D.cube_box(c))]
    for ell in range(0, m):
        for f in cube_faces(c, ell, Orientation.TOP, m):
            out.append((ell, *D.face_box(f)))
    for ell in range(1, m):
        for f in cube_faces(c, ell, Orientation.VERTICAL, m):
            out.append((ell, *D.face_box(f)))
    for child in D.children(c):
        for ell in range(0, m):
            for f in cube_faces(child, ell, Orientation.TOP, m):
                out.append((ell, *D.face_box(f)))
    uniq = {}
    for d, lo, hi in out:
        uniq[(d, tuple(lo), tuple(hi))] = (d, lo, hi)
    return list(uniq.values())


def dual_simplices(D: DyadicDecomposition, c: CubeId, j: int) -> list[np.ndarray]:
    """Simplices of the dual j-skeleton inside the cube c (vertex arrays)."""
    if j < 0:
        return []
    m = D.m
    fcs = _cube_complex_faces(D, c)
    by_dim: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
    for d, lo, hi in fcs:
        by_dim.setdefault(d, []).append((lo, hi))
    chains = [[by_dim[m][0]]]
    for d in range(m - 1, m - j - 1, -1):
        nxt = []
        for ch in chains:
            big = ch[-1]
            for f in by_dim.get(d, []):
                if box_contains_box(big, f):
                    nxt.append(ch + [f])
        chains = nxt
    return [np.array([0.5 * (lo + hi) for lo, hi in ch]) for ch in chains]


def point_simplex_distance(x: np.ndarray, verts: np.ndarray) -> float:
    """Euclidean distance from x to the convex hull of affinely independent verts."""
    n = len(verts)
    best = math.inf
    for r in range(1, n + 1):
        for sub in itertools.combinations(range(n), r):
            P = verts[list(sub)]
            if r == 1:
                best = min(best, float(np.linalg.norm(x - P[0])))
                continue
            A = (P[1:] - P[0]).T
            coef, *_ = np.linalg.lstsq(A, x - P[0], rcond=None)
            lam = np.concatenate([[1 - coef.sum()], coef])
            if np.all(lam >= -1e-12):
                best = min(best, float(np.linalg.norm(x - P[0] - A @ coef)))
    return best


class DualSkeleton:
    """Distance queries to the dual j-skeleton restricted to a cube set."""

    def __init__(self, D: DyadicDecomposition, j: int, cubes: Iterable[CubeId]):
        self.D = D
        self.j = j
        self.cubes = sorted(set(cubes))
        self._simp: dict[CubeId, list[np.ndarray]] = {}
        if self.cubes:
            boxes = [D.cube_box(c) for c in self.cubes]
            self._lo = np.array([b[0] for b in boxes])
            self._hi = np.array([b[1] for b in boxes])

    def simplices(self, c: CubeId) -> list[np.ndarray]:
        if c not in self._simp:
            self._simp[c] = dual_simplices(self.D, c, self.j)
        return self._simp[c]

    def distance(self, x) -> float:
        if self.j < 0 or not self.cubes:
            return math.inf
        x = np.asarray(x, dtype=float)
        bd = box_distance(x, self._lo, self._hi)
        order = np.argsort(bd, kind="stable")
        best = math.inf
        for idx in order:
            if bd[idx] >= best:
                break
            for s in self.simplices(self.cubes[idx]):
                best = min(best, point_simplex_distance(x, s))
        return best


def dual_skeleton_distance(D: DyadicDecomposition, j: int, x, cubes: Iterable[CubeId]) -> float:
    return DualSkeleton(D, j, cubes).distance(x)


# ------------------------------------------------------------------ descending
@dataclass
class DescendingReport:
    ok: bool
    checked: int
    violation: dict | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_descending(
    psi: Callable | None,
    D: DyadicDecomposition,
    points,
    tolerance: float = 1e-9,
    images=None,
) -> DescendingReport:
    """Check that every sample is mapped into the column below each closed cube containing it.

    Either a callable ``psi`` or precomputed ``images`` must be given.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if images is None:
        images = np.array([np.asarray(psi(p), dtype=float) for p in pts])
    images = np.atleast_2d(np.asarray(images, dtype=float))
    for p, q in zip(pts, images):
        for c in D.cubes_containing(p, active_only=False):
            lo, hi = D.cube_box(c)
            inside = (
                np.all(q[:-1] >= lo[:-1] - tolerance)
                and np.all(q[:-1] <= hi[:-1] + tolerance)
                and q[-1] >= -tolerance
                and q[-1] <= hi[-1] + tolerance
            )
            if not inside:
                return DescendingReport(
                    False,
                    len(pts),
                    {"point": p.tolist(), "image": q.tolist(), "cube": [c.level, list(c.lattice)]},
                )
    return DescendingReport(True, len(pts))


@lru_cache(maxsize=None)
def vertical_faces_per_cube(m: int, ell: int) -> int:
    return math.comb(m - 1, ell - 1) * 2 ** (m - ell)
