"""Singular-cube constructions with their descending retractions.

Three constructions are provided:

* ``supercritical_propagate``: bad cubes plus every cube sitting on top of a
  singular cube, with a retraction defined on whole cubes;
* ``spawn_over_singular_set``: cubes meeting the cone over a boundary singular
  set, with the cone retraction;
* ``propagate_and_decay``: singular vertical faces propagated upward with a
  per-level shift chosen to make them decay, with a retraction defined on an
  ell-dimensional skeleton.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import lsq_linear
from scipy.spatial import cKDTree

from .boundary_data import SingularSet
from .dyadic_geometry import (
    CubeId,
    DyadicDecomposition,
    GeometryError,
    box_distance,
    lattice_position,
    level_of_height,
)

Face = tuple[tuple[int, ...], tuple[int, ...]]  # (vertex, free horizontal axes)


class ConstructionError(RuntimeError):
    """A hypothesis of a construction is violated."""


# ------------------------------------------------------------ slab retraction
class ConvexPolytope:
    """{y : A y <= 1}, a convex polytope with the origin in its interior."""

    def __init__(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.size and not np.all(np.isfinite(A)):
            raise GeometryError("degenerate polytope")
        self.A = A

    @classmethod
    def box(cls, halfwidths: Sequence[float]) -> "ConvexPolytope":
        a = np.asarray(halfwidths, dtype=float)
        if np.any(a <= 0):
            raise GeometryError("box half-widths must be positive")
        d = np.diag(1.0 / a) if len(a) else np.zeros((0, 0))
        return cls(np.vstack([d, -d]) if len(a) else np.zeros((0, 0)))

    @property
    def dim(self) -> int:
        return self.A.shape[1] if self.A.size else 0

    def gauge(self, y) -> float:
        y = np.asarray(y, dtype=float)
        if y.size == 0 or self.A.size == 0:
            return 0.0
        return max(0.0, float(np.max(self.A @ y)))


def slab_retraction(omega, x) -> np.ndarray:
    """Retract the cylinder omega x [0,1] onto its walls and bottom.

    ``omega`` is a ConvexPolytope or a sequence of box half-widths; ``x`` has
    the horizontal coordinates first and the height last.
    """
    if not isinstance(omega, ConvexPolytope):
        omega = ConvexPolytope.box(omega)
    x = np.asarray(x, dtype=float)
    y, t = x[:-1], float(x[-1])
    g = omega.gauge(y)
    if g <= 1.0 - t / 2.0:
        return np.append(2.0 * y / (2.0 - t), 0.0)
    return np.append(y / g, 2.0 - (2.0 - t) / g)


@lru_cache(maxsize=None)
def _unit_box(d: int) -> ConvexPolytope:
    return ConvexPolytope.box(np.ones(d)) if d else ConvexPolytope(np.zeros((0, 0)))


def face_slab(D: DyadicDecomposition, level: int, vertex, axes, x) -> np.ndarray:
    """Slab retraction of the vertical face (vertex, axes) at ``level`` applied to x.

    The output is snapped exactly onto the face boundary it lands on.
    """
    x = np.array(x, dtype=float)
    s = 2.0 ** level
    lo = D.shift(level) + s * np.asarray(vertex, dtype=float)
    ax = list(axes)
    a = s / 2.0
    c = lo[ax] + a
    y = (x[ax] - c) / a
    t = (x[-1] - s) / s
    r = slab_retraction(_unit_box(len(ax)), np.append(y, t))
    out = x.copy()
    yy = r[:-1]
    for idx, i in enumerate(ax):
        if yy[idx] >= 1.0 - 1e-13:
            out[i] = lo[i] + s
        elif yy[idx] <= -1.0 + 1e-13:
            out[i] = lo[i]
        else:
            out[i] = c[idx] + a * yy[idx]
    tt = r[-1]
    out[-1] = s if tt <= 1e-13 else (2 * s if tt >= 1 - 1e-13 else s + s * tt)
    return out


# ------------------------------------------------------------ lattice helpers
def cubes_with_vertical_face(level: int, vertex, axes, m: int) -> list[CubeId]:
    choices = []
    for i in range(m - 1):
        choices.append((vertex[i],) if i in axes else (vertex[i] - 1, vertex[i]))
    return [CubeId(level, tuple(z)) for z in itertools.product(*choices)]


def cubes_over_top(D: DyadicDecomposition, level: int, vertex, axes) -> list[CubeId]:
    """Level-(level+1) cubes containing the top face (vertex, axes) of ``level``."""
    d = D.relative_offset(level + 1)
    choices = []
    for i in range(D.m - 1):
        n = vertex[i] - d[i]
        if i in axes or n % 2:
            choices.append((n // 2,))
        else:
            choices.append((n // 2 - 1, n // 2))
    return [CubeId(level + 1, tuple(z)) for z in itertools.product(*choices)]


def adjacent_above(vertex, axes, offset) -> tuple[int, ...] | None:
    """Vertex of the face one level up adjacent to (vertex, axes), or None."""
    out = []
    for i, (w, d) in enumerate(zip(vertex, offset)):
        n = w - d
        if i not in axes and n % 2:
            return None
        out.append(n // 2)
    return tuple(out)


def vertical_faces_of_cube(c: CubeId, j: int, m: int) -> list[Face]:
    out = []
    for axes in itertools.combinations(range(m - 1), j - 1):
        fixed = [i for i in range(m - 1) if i not in axes]
        for bits in itertools.product((0, 1), repeat=len(fixed)):
            v = list(c.lattice)
            for i, b in zip(fixed, bits):
                v[i] += b
            out.append((tuple(v), axes))
    return out


def _face_box(D: DyadicDecomposition, level: int, vertex, axes, top: bool):
    s = 2.0 ** level
    lo = D.shift(level) + s * np.asarray(vertex, dtype=float)
    hi = lo.copy()
    for i in axes:
        hi[i] += s
    if top:
        return np.append(lo, 2 * s), np.append(hi, 2 * s)
    return np.append(lo, s), np.append(hi, 2 * s)


def point_face(D: DyadicDecomposition, x) -> tuple[int, bool, tuple[int, ...], tuple[int, ...]]:
    """(level, is_top, vertex, axes) of the smallest face containing x."""
    t = float(x[-1])
    k = level_of_height(t)
    top = t == 2.0 ** k
    if top:
        k -= 1
    s = 2.0 ** k
    r = (np.asarray(x[:-1], dtype=float) - D.shift(k)) / s
    vertex, axes = [], []
    for i, v in enumerate(r):
        f, on = lattice_position(v)
        vertex.append(f)
        if not on:
            axes.append(i)
    return k, top, tuple(vertex), tuple(axes)


# ------------------------------------------------------------------ bad region
class BadRegion:
    """Finite union of open balls in the half-space."""

    def __init__(self, centers, radii):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.radii = np.asarray(radii, dtype=float).reshape(-1)
        if self.centers.size == 0:
            self.centers = self.centers.reshape(0, max(self.centers.shape[-1], 1))
        self.tree = cKDTree(self.centers) if len(self.radii) else None
        self.rmax = float(self.radii.max()) if len(self.radii) else 0.0

    @classmethod
    def empty(cls, m: int) -> "BadRegion":
        return cls(np.zeros((0, m)), np.zeros(0))

    @classmethod
    def from_classification(cls, cl) -> "BadRegion":
        return cls(cl.bad_points.reshape(-1, cl.decomposition.m), cl.bad_radii)

    def __len__(self) -> int:
        return len(self.radii)

    def meets_box(self, lo, hi) -> bool:
        if self.tree is None:
            return False
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        c = 0.5 * (lo + hi)
        reach = 0.5 * float(np.linalg.norm(hi - lo)) + self.rmax
        idx = self.tree.query_ball_point(c, reach)
        if not idx:
            return False
        idx = np.asarray(idx)
        return bool(np.any(box_distance(self.centers[idx], lo, hi) < self.radii[idx]))

    def contains(self, x) -> bool:
        if self.tree is None:
            return False
        idx = self.tree.query_ball_point(np.asarray(x, float), self.rmax)
        if not idx:
            return False
        idx = np.asarray(idx)
        return bool(np.any(np.linalg.norm(self.centers[idx] - x, axis=1) < self.radii[idx]))

    def lowest(self) -> float:
        return float(np.min(self.centers[:, -1] - self.radii)) if len(self) else math.inf

    def cubes_meeting(self, D: DyadicDecomposition, level: int) -> set[CubeId]:
        out: set[CubeId] = set()
        if self.tree is None:
            return out
        s = 2.0 ** level
        sel = (self.centers[:, -1] - self.radii < 2 * s) & (self.centers[:, -1] + self.radii > s)
        xi = D.shift(level)
        for p, r in zip(self.centers[sel], self.radii[sel]):
            a = np.floor((p[:-1] - r - xi) / s).astype(int)
            b = np.floor((p[:-1] + r - xi) / s).astype(int)
            for z in itertools.product(*[range(i, j + 1) for i, j in zip(a, b)]):
                c = CubeId(level, tuple(int(v) for v in z))
                if c in out:
                    continue
                lo, hi = D.cube_box(c)
                if box_distance(p, lo, hi) < r:
                    out.add(c)
        return out


# ------------------------------------------------------------ common container
@dataclass
class CountCheck:
    level: int
    lhs: int
    rhs: Fraction

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs


class SingularComplex:
    kind = "abstract"

    D: DyadicDecomposition
    sing: set[CubeId]
    ell: int

    def counts(self) -> dict[int, int]:
        out = {k: 0 for k in self.D.levels()}
        for c in self.sing:
            if c.level in out:
                out[c.level] += 1
        return out

    def is_singular(self, c: CubeId) -> bool:
        return c in self.sing

    def weighted_size(self, p: float) -> float:
        return float(sum(n * 2.0 ** (k * (self.D.m - p)) for k, n in self.counts().items()))

    def psi(self, x) -> np.ndarray:
        raise NotImplementedError

    def flag(self, c: CubeId) -> str:
        return "SING"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["level"] + [f"zeta{i}" for i in range(self.D.m - 1)] + ["flag"])
        for c in sorted(self.sing):
            wr.writerow([c.level, *c.lattice, self.flag(c)])
        return buf.getvalue()


# ---------------------------------------------------------------- supercritical
class SupercriticalComplex(SingularComplex):
    kind = "supercritical"

    def __init__(self, D: DyadicDecomposition, bad: Iterable[CubeId], k0: int):
        self.D = D
        self.ell = D.m
        self.k0 = k0
        self.bad = set(bad)
        for c in self.bad:
            if c.level < k0:
                raise ConstructionError(f"bad cube {c} lies below k0={k0}")
            if not D.k_min <= c.level <= D.k_max:
                raise ConstructionError(f"bad cube {c} outside the active levels")
        by_level: dict[int, set[CubeId]] = {}
        for c in self.bad:
            by_level.setdefault(c.level, set()).add(c)
        self.prop: set[CubeId] = set()
        sing: set[CubeId] = set()
        prev: set[CubeId] = set()
        for k in range(k0, D.k_max + 1):
            up = {D.parent(c) for c in prev}
            self.prop |= up - by_level.get(k, set())
            cur = by_level.get(k, set()) | up
            sing |= cur
            prev = cur
        self.sing = sing
        self._check_top_faces()

    def flag(self, c):
        return "BAD" if c in self.bad else "PROP"

    def _check_top_faces(self) -> None:
        """No singular vertical face has its top inside a regular cube."""
        m = self.D.m
        for c in self.sing:
            for j in range(1, m + 1):
                for v, ax in vertical_faces_of_cube(c, j, m):
                    if not all(q in self.sing for q in cubes_with_vertical_face(c.level, v, ax, m)):
                        continue
                    if c.level + 1 > self.D.k_max:
                        continue
                    for q in cubes_over_top(self.D, c.level, v, ax):
                        if q not in self.sing:
                            raise ConstructionError(
                                f"top of singular face {(c.level, v, ax)} lies in regular cube {q}"
                            )

    def count_checks(self) -> list[CountCheck]:
        bad_counts = {k: 0 for k in self.D.levels()}
        for c in self.bad:
            bad_counts[c.level] += 1
        cnt = self.counts()
        out, run = [], 0
        for k in range(self.k0, self.D.k_max + 1):
            run += bad_counts[k]
            out.append(CountCheck(k, cnt[k], Fraction(run)))
        return out

    def geometric_check(self, p: float) -> tuple[float, float]:
        """(weighted singular size, (1 - 2^{-(p-m)})^{-1} weighted bad size)."""
        m = self.D.m
        bad_w = sum(2.0 ** (c.level * (m - p)) for c in self.bad)
        return self.weighted_size(p), bad_w / (1.0 - 2.0 ** (-(p - m)))

    def is_regular_point(self, x) -> bool:
        cs = self.D.cubes_containing(x)
        return (not cs) or any(c not in self.sing for c in cs)

    def psi(self, x) -> np.ndarray:
        D = self.D
        x = np.array(x, dtype=float)
        for _ in range(64 * D.m * (D.k_max - D.k_min + 2)):
            if x[-1] <= 2.0 ** self.k0 or self.is_regular_point(x):
                return x
            k, top, v, ax = point_face(D, x)
            x = face_slab(D, k, v, ax, x)
        raise RuntimeError("retraction did not terminate")


def supercritical_propagate(D: DyadicDecomposition, bad: Iterable[CubeId], k0: int) -> SupercriticalComplex:
    return SupercriticalComplex(D, bad, k0)


# -------------------------------------------------------------------- spawning
def _box_subspace_distance(lo, hi, base, dirs) -> float:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    b = np.asarray(base, float)
    n = len(b)
    if dirs:
        Q, _ = np.linalg.qr(np.asarray(dirs, float).T)
        P = np.eye(n) - Q @ Q.T
    else:
        P = np.eye(n)
    if np.all(lo == hi):
        return float(np.linalg.norm(P @ (lo - b)))
    res = lsq_linear(P, P @ b, bounds=(lo, np.maximum(hi, lo + 1e-300)), method="bvls")
    return float(np.linalg.norm(P @ res.x - P @ b))


def box_singular_distance(Sigma: SingularSet, lo, hi) -> float:
    if Sigma is None or Sigma.empty:
        return math.inf
    if all(not d for _, d in Sigma.pieces):
        pts = np.array([b for b, _ in Sigma.pieces], float)
        return float(np.min(box_distance(pts, lo, hi)))
    return min(_box_subspace_distance(lo, hi, b, d) for b, d in Sigma.pieces)


def _lattice_hits(Sigma: SingularSet, D: DyadicDecomposition, ell: int, bounds, tol_rel: float = 1e-6) -> bool:
    """Whether some horizontal ell-face of some active level meets Sigma."""
    m = D.m
    blo, bhi = (np.asarray(b, float) for b in bounds)
    for base, dirs in Sigma.pieces:
        b = np.asarray(base, float)
        V = np.asarray(dirs, float).reshape(-1, m - 1)
        for k in D.levels():
            s = 2.0 ** k
            xi = D.shift(k)
            for axes in itertools.combinations(range(m - 1), ell):
                fixed = [i for i in range(m - 1) if i not in axes]
                if not fixed:
                    return True
                if len(V) == 0:
                    r = (b[fixed] - xi[fixed]) / s
                    if np.all(np.abs(r - np.round(r)) < tol_rel):
                        return True
                    continue
                # restricted to the fixed coordinates the piece is an affine set
                Vf = V[:, fixed]
                rank = np.linalg.matrix_rank(Vf) if Vf.size else 0
                if rank >= len(fixed):
                    return True
                if rank == 0:
                    r = (b[fixed] - xi[fixed]) / s
                    if np.all(np.abs(r - np.round(r)) < tol_rel):
                        return True
                    continue
                if rank == 1 and len(fixed) >= 2:
                    dvec = Vf[np.argmax(np.linalg.norm(Vf, axis=1))]
                    i0 = int(np.argmax(np.abs(dvec)))
                    lo_n = math.floor((blo[fixed[i0]] - xi[fixed[i0]]) / s) - 1
                    hi_n = math.ceil((bhi[fixed[i0]] - xi[fixed[i0]]) / s) + 1
                    for n in range(lo_n, hi_n + 1):
                        tpar = (xi[fixed[i0]] + n * s - b[fixed[i0]]) / dvec[i0]
                        pt = b[fixed] + tpar * dvec
                        r = (pt - xi[fixed]) / s
                        if np.all(np.abs(r - np.round(r)) < tol_rel):
                            return True
                    continue
                raise NotImplementedError("transversality check for this singular-set shape")
    return False


@dataclass
class SpawnResult:
    decomposition: DyadicDecomposition
    cubes: set[CubeId]
    psi: Callable
    M: float
    kappa: float
    translate: np.ndarray
    Sigma: SingularSet | None
    ell: int
    attempts: int = 0

    def __iter__(self):
        return iter((self.decomposition, self.cubes, self.psi))

    def counts(self) -> dict[int, int]:
        out = {k: 0 for k in self.decomposition.levels()}
        for c in self.cubes:
            out[c.level] += 1
        return out


def cone_retraction(Sigma: SingularSet | None, kappa: float) -> Callable:
    """x if B_{kappa x_m}(x') misses Sigma, else (x', dist(x', Sigma)/kappa)."""

    def psi(x):
        x = np.array(x, dtype=float)
        if Sigma is None or Sigma.empty:
            return x
        d = float(Sigma.distance(x[:-1]))
        if d >= kappa * x[-1]:
            return x
        x[-1] = d / kappa
        return x

    return psi


def spawn_over_singular_set(
    Sigma: SingularSet | None,
    kappa: float,
    ell: int,
    D: DyadicDecomposition,
    bounds,
    seed: int = 0,
    max_attempts: int = 2000,
) -> SpawnResult:
    """Translate D so its ell-faces miss Sigma x (0, inf) and collect cubes not inside the cone complement."""
    m = D.m
    if kappa <= 0:
        raise ConstructionError("kappa must be positive")
    empty = Sigma is None or Sigma.empty
    if not empty and Sigma.dim > m - ell - 2:
        raise ConstructionError(
            f"singular set of dimension {Sigma.dim} is too large for ell={ell} in m={m}"
        )
    blo, bhi = (np.asarray(b, float) for b in bounds)
    if empty:
        return SpawnResult(D, set(), cone_retraction(None, kappa), 0.0, kappa, np.zeros(m - 1), Sigma, ell)
    rng = np.random.default_rng(seed)
    # a fine non-dyadic lattice of candidate translates
    denom = 3 ** 9
    span = 2.0 ** (D.k_max + 1)
    Dt = None
    for attempt in range(1, max_attempts + 1):
        xi = span * rng.integers(0, denom, size=m - 1) / denom
        cand = D.translated(xi)
        if not _lattice_hits(Sigma, cand, ell, (blo, bhi)):
            Dt = cand
            break
    if Dt is None:
        raise ConstructionError("no transversal translate found")
    cubes: set[CubeId] = set()
    for k in Dt.levels():
        s = 2.0 ** k
        x0 = Dt.shift(k)
        first = np.floor((blo - x0) / s).astype(int)
        last = np.ceil((bhi - x0) / s).astype(int)
        for z in itertools.product(*[range(a, b + 1) for a, b in zip(first, last)]):
            c = CubeId(k, tuple(int(v) for v in z))
            lo, hi = Dt.cube_box(c)
            if box_singular_distance(Sigma, lo[:-1], hi[:-1]) < kappa * hi[-1]:
                cubes.add(c)
    counts = {k: 0 for k in Dt.levels()}
    for c in cubes:
        counts[c.level] += 1
    M = max((n * 2.0 ** (k * (m - ell - 2)) for k, n in counts.items()), default=0.0)
    return SpawnResult(Dt, cubes, cone_retraction(Sigma, kappa), M, kappa, Dt.origin.copy(), Sigma, ell, attempt)


# ------------------------------------------------------- propagation and decay
@dataclass
class LevelRecord:
    level: int
    zeta: tuple[int, ...]
    candidate_counts: dict[tuple[int, ...], int]
    t_prev: int
    t_prop: int
    t_bad: int
    bad_cubes: int
    prop_cubes: int


class SubcriticalComplex(SingularComplex):
    kind = "subcritical"

    def __init__(
        self,
        D_inf: DyadicDecomposition,
        sing_inf: Iterable[CubeId],
        bad_region: BadRegion,
        ell: int,
        k0: int,
        psi_inf: Callable | None = None,
        check_hypothesis: bool = True,
    ):
        m = D_inf.m
        if not 1 <= ell <= m:
            raise ConstructionError("ell must lie in [1, m]")
        if not D_inf.k_min <= k0 <= D_inf.k_max + 1:
            raise ConstructionError("k0 outside the active range")
        self.D_inf = D_inf
        self.ell = ell
        self.k0 = k0
        self.bad_region = bad_region
        self.psi_inf = psi_inf if psi_inf is not None else (lambda x: np.array(x, dtype=float))
        self.sing_inf = {c for c in sing_inf if c.level < k0}
        if check_hypothesis:
            self._check_hypothesis()
        # seeds: vertical ell-faces at k0-1 not contained in a regular cube
        seeds: set[Face] = set()
        for c in self.sing_inf:
            if c.level != k0 - 1:
                continue
            for v, ax in vertical_faces_of_cube(c, ell, m):
                if all(q in self.sing_inf for q in cubes_with_vertical_face(c.level, v, ax, m)):
                    seeds.add((v, ax))
        self.T: dict[int, set[Face]] = {k0 - 1: seeds}
        self.T_prop: dict[int, set[Face]] = {}
        self.T_bad: dict[int, set[Face]] = {}
        self.bad_cubes: set[CubeId] = set()
        self.prop_cubes: set[CubeId] = set()
        self.records: list[LevelRecord] = []
        increments = {k: tuple(v) for k, v in D_inf.increments.items()}
        D = D_inf
        bits_all = list(itertools.product((0, 1), repeat=m - 1))
        for k in range(k0, D_inf.k_max + 1):
            prev = self.T[k - 1]
            base = D_inf.increments[k]
            best, best_bits, cand_counts = None, None, {}
            for bits in bits_all:
                offset = tuple(int(round(b / 2.0 ** (k - 1))) + e for b, e in zip(base, bits))
                prop = set()
                for v, ax in prev:
                    a = adjacent_above(v, ax, offset)
                    if a is not None:
                        prop.add((a, ax))
                cand_counts[bits] = len(prop)
                if best is None or len(prop) < len(best):
                    best, best_bits = prop, bits
            increments[k] = tuple(b + e * 2.0 ** (k - 1) for b, e in zip(base, best_bits))
            D = DyadicDecomposition(m, D_inf.k_min, D_inf.k_max, increments, D_inf.origin)
            bad_k = bad_region.cubes_meeting(D, k)
            tbad: set[Face] = set()
            for c in bad_k:
                for v, ax in vertical_faces_of_cube(c, ell, m):
                    if (v, ax) in tbad:
                        continue
                    lo, hi = _face_box(D, k, v, ax, top=False)
                    if bad_region.meets_box(lo, hi):
                        tbad.add((v, ax))
            prop_k: set[CubeId] = set()
            for v, ax in prev:
                prop_k.update(cubes_over_top(D, k - 1, v, ax))
            self.T_prop[k] = best
            self.T_bad[k] = tbad
            self.T[k] = best | tbad
            self.bad_cubes |= bad_k
            self.prop_cubes |= prop_k
            self.records.append(LevelRecord(k, tuple(best_bits), {"".join(map(str, b)): n for b, n in cand_counts.items()},
                                            len(prev), len(best), len(tbad), len(bad_k), len(prop_k)))
        self.D = D if k0 <= D_inf.k_max else D_inf
        self.zeta = {r.level: r.zeta for r in self.records}
        self.sing = set(self.sing_inf) | self.bad_cubes | self.prop_cubes
        self._check_top_faces()

    # -------------------------------------------------------------- checks
    def _check_hypothesis(self) -> None:
        for k in range(self.D_inf.k_min, self.k0):
            for c in self.bad_region.cubes_meeting(self.D_inf, k):
                if c not in self.sing_inf:
                    raise ConstructionError(
                        f"bad region meets cube {c} below k0={self.k0} outside the spawned singular cubes"
                    )
        if self.bad_region.lowest() < 2.0 ** self.D_inf.k_min and len(self.bad_region):
            low = self.bad_region.lowest()
            # with k0 at the window bottom the finest active scale stands in for the trace
            if low < 2.0 ** self.k0 and not self.sing_inf and self.k0 > self.D_inf.k_min:
                raise ConstructionError("bad region reaches below the active levels")

    def _check_top_faces(self) -> None:
        for k in range(self.k0 - 1, self.D.k_max):
            offset = self.D.relative_offset(k + 1)
            for v, ax in self.T[k]:
                a = adjacent_above(v, ax, offset)
                if a is not None and (a, ax) not in self.T[k + 1]:
                    raise ConstructionError(f"top of singular face {(k, v, ax)} lies in a regular face")

    def flag(self, c):
        if c in self.sing_inf:
            return "SING"
        return "BAD" if c in self.bad_cubes else "PROP"

    def shifts_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["level"] + [f"zeta{i}" for i in range(self.D.m - 1)])
        for r in self.records:
            wr.writerow([r.level, *[e * 2.0 ** (r.level - 1) for e in r.zeta]])
        return buf.getvalue()

    def face_checks(self) -> list[CountCheck]:
        """#T_prop_k * 2^{m-ell} <= #T_{k-1} at every level."""
        m = self.D.m
        return [
            CountCheck(r.level, r.t_prop, Fraction(r.t_prev, 2 ** (m - self.ell)))
            for r in self.records
        ]

    def count_checks(self) -> list[CountCheck]:
        m, ell, k0 = self.D.m, self.ell, self.k0
        binom = math.comb(m - 1, ell - 1)
        s_inf = sum(1 for c in self.sing_inf if c.level == k0 - 1)
        bad = {k: 0 for k in range(k0, self.D.k_max + 1)}
        for c in self.bad_cubes:
            if c.level >= k0:
                bad[c.level] += 1
        cnt = self.counts()
        out = []
        for k in range(k0, self.D.k_max + 1):
            rhs = Fraction(s_inf) * Fraction(2) ** (-(k - k0) * (m - ell))
            for i in range(k0, k + 1):
                rhs += Fraction(bad[i]) * Fraction(2) ** (-(k - i - 1) * (m - ell))
            out.append(CountCheck(k, cnt[k], binom * rhs))
        return out

    # ---------------------------------------------------------- retraction
    def _vertical_regular(self, k: int, v, ax) -> bool:
        return (v, ax) not in self.T.get(k, ())

    def _inside_regular_ell_face(self, k: int, v, ax) -> bool:
        m, ell = self.D.m, self.ell
        if len(ax) + 1 == ell:
            return self._vertical_regular(k, v, ax)
        others = [i for i in range(m - 1) if i not in ax]
        for extra in itertools.combinations(others, ell - 1 - len(ax)):
            axes = tuple(sorted(ax + extra))
            for bits in itertools.product((0, 1), repeat=len(extra)):
                w = list(v)
                for i, b in zip(extra, bits):
                    w[i] -= b
                if self._vertical_regular(k, tuple(w), axes):
                    return True
        return False

    def _top_identity(self, k: int, v, ax) -> bool:
        for i in ax:
            rest = tuple(a for a in ax if a != i)
            w = list(v)
            w[i] += 1
            if not (self._vertical_regular(k, v, rest) and self._vertical_regular(k, tuple(w), rest)):
                return False
        lo, hi = _face_box(self.D, k, v, ax, top=True)
        return not self.bad_region.meets_box(lo, hi)

    def on_skeleton(self, x) -> bool:
        k, top, v, ax = point_face(self.D, x)
        return len(ax) <= (self.ell if top else self.ell - 1)

    def psi(self, x) -> np.ndarray:
        D, ell, k0 = self.D, self.ell, self.k0
        x = np.array(x, dtype=float)
        if x[-1] > 2.0 ** (D.k_max + 1):
            raise GeometryError("point lies above the active levels")
        for _ in range(64 * D.m * (D.k_max - D.k_min + 3)):
            k, top, v, ax = point_face(D, x)
            if top and len(ax) == ell:
                if k <= k0 - 2:
                    return self.psi_inf(x)
                if self._top_identity(k, v, ax):
                    return x
                x = face_slab(D, k, v, ax, x)
                continue
            if len(ax) > ell - 1:
                raise GeometryError(f"point {x.tolist()} is not on the {ell}-skeleton")
            if k <= k0 - 1:
                return self.psi_inf(x)
            if self._inside_regular_ell_face(k, v, ax):
                return x
            x = face_slab(D, k, v, ax, x)
        raise RuntimeError("retraction did not terminate")


def propagate_and_decay(
    D_inf: DyadicDecomposition,
    sing_inf: Iterable[CubeId],
    bad_region: BadRegion,
    ell: int,
    k0: int,
    psi_inf: Callable | None = None,
    shift_policy: str = "min-lex",
) -> SubcriticalComplex:
    if shift_policy != "min-lex":
        raise ValueError("only the lexicographic minimizing policy is implemented")
    return SubcriticalComplex(D_inf, sing_inf, bad_region, ell, k0, psi_inf)


# ------------------------------------------------------------------ sampling
def sample_skeleton_points(
    D: DyadicDecomposition,
    cubes: Sequence[CubeId],
    ell: int,
    count: int,
    rng: np.random.Generator,
    boundary_fraction: float = 0.25,
) -> np.ndarray:
    """Random points on ell-dimensional (or lower) faces of the given cubes.

    ``ell = m`` samples whole cubes.
    """
    m = D.m
    cubes = list(cubes)
    if not cubes:
        return np.zeros((0, m))
    pts = np.empty((count, m))
    for n in range(count):
        c = cubes[rng.integers(len(cubes))]
        lo, hi = D.cube_box(c)
        if ell >= m:
            y = lo + (hi - lo) * rng.random(m)
        else:
            top = rng.random() < 0.5
            nfree = ell if top else ell - 1
            axes = rng.choice(m - 1, size=nfree, replace=False) if nfree else []
            y = lo.copy()
            for i in range(m - 1):
                if i in axes:
                    y[i] = lo[i] + (hi[i] - lo[i]) * rng.random()
                else:
                    y[i] = lo[i] if rng.random() < 0.5 else hi[i]
            y[-1] = hi[-1] if top else lo[-1] + (hi[-1] - lo[-1]) * rng.random()
        if rng.random() < boundary_fraction:
            i = rng.integers(m)
            y[i] = lo[i] if rng.random() < 0.5 else hi[i]
        pts[n] = y
    return pts


# ------------------------------------------------------------------ neat cone
@dataclass
class NeatCone:
    kappa: float
    formula: float
    doublings: int
    c_mo: float
    bound: float
    violations: int


def cone_violations(Sigma: SingularSet, kappa: float, bad: BadRegion) -> int:
    """Bad balls reaching {dist(x', Sigma) >= kappa x_m} (sufficient test on ball margins)."""
    if Sigma is None or Sigma.empty or len(bad) == 0:
        return 0
    d = Sigma.distance(bad.centers[:, :-1])
    # signed margin of a ball against the cone boundary
    g = d - kappa * bad.centers[:, -1] + bad.radii * math.sqrt(1.0 + kappa * kappa)
    return int(np.sum(g > 0))


def cube_cone_violations(Sigma: SingularSet, kappa: float, D: DyadicDecomposition, cubes: Iterable[CubeId]) -> list[CubeId]:
    """Cubes not contained in the open cone {dist(x', Sigma) < kappa x_m}."""
    out = []
    if Sigma is None or Sigma.empty:
        return list(cubes)
    for c in cubes:
        lo, hi = D.cube_box(c)
        corners = np.array(list(itertools.product(*zip(lo[:-1], hi[:-1]))))
        # distance to an affine set is convex, so the box maximum sits at a corner
        if float(np.max(Sigma.distance(corners))) >= kappa * lo[-1]:
            out.append(c)
    return out


def neat_cone_kappa(u, phi, delta_star: float, bad: BadRegion, c_mo: float | None = None,
                    max_doublings: int = 8, classification=None) -> NeatCone:
    """kappa = 1 + C_MO * B / delta_star, doubled until the bad set sits inside the cone."""
    ss = u.singular_set
    if ss is None:
        raise ConstructionError("boundary data carries no singular-set descriptor")
    bound = float(ss.bound or 0.0)
    if c_mo is None:
        c_mo = 1.0
    formula = 1.0 + c_mo * bound / delta_star
    kappa = formula
    if ss.empty:
        return NeatCone(kappa, formula, 0, c_mo, bound, 0)
    for n in range(max_doublings + 1):
        v = cone_violations(ss, kappa, bad)
        if classification is not None:
            v += len(cube_cone_violations(ss, kappa, classification.decomposition, classification.bad))
        if v == 0:
            return NeatCone(kappa, formula, n, c_mo, bound, 0)
        if n < max_doublings:
            kappa *= 2.0
    raise ConstructionError(
        f"bad set leaves every cone up to kappa={kappa:g} ({v} violations); discretization not converged"
    )


# ------------------------------------------------------------------ k0 choice
def choose_k0(M: float, bad_weighted_by_k0: Callable[[int], float], ell: int, p: float,
              levels: range, admissible: Callable[[int], bool]) -> int:
    """Largest admissible k0 whose spawning term M 2^{k0(ell+2-p)} stays below the bad weighted size."""
    for k0 in sorted(levels, reverse=True):
        if not admissible(k0):
            continue
        if M * 2.0 ** (k0 * (ell + 2 - p)) <= bad_weighted_by_k0(k0):
            return k0
    for k0 in sorted(levels):
        if admissible(k0):
            return k0
    raise ConstructionError("no admissible k0 in the active range")
