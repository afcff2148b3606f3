"""Manifold-valued extension U built from the singular-cube constructions.

On regular cubes U is the projected convolution extension.  On singular cubes
U is rebuilt face by face in increasing dimension: vertices get a base point,
faces up to dimension ell get constructive fills, higher faces get
homogeneous (cone) extensions that are singular on a dual skeleton.
"""
from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .boundary_data import BoundaryMap
from .dyadic_geometry import (
    CubeId,
    DualSkeleton,
    DyadicDecomposition,
    GeometryError,
    cubes_over_domain,
    lattice_position,
)
from .linear_extension import classify, extension_eval, mollifier
from .singular_complex import (
    BadRegion,
    ConstructionError,
    choose_k0,
    neat_cone_kappa,
    point_face,
    propagate_and_decay,
    spawn_over_singular_set,
    supercritical_propagate,
)
from .targets import ProjectionOutOfRange, TargetManifold


class NoFill(RuntimeError):
    """A face whose boundary values admit no constructive fill."""

    code = "NO_FILL"

    def __init__(self, reason: str, cell: "Cell | None" = None, **extra):
        self.reason = reason
        self.cell = cell
        self.extra = extra
        where = "" if cell is None else f" on {cell.dim}-face {cell.to_dict()}"
        super().__init__(f"{self.code}: {reason}{where}")

    @property
    def report(self) -> dict:
        return {
            "code": self.code,
            "face": None if self.cell is None else self.cell.to_dict(),
            "level": None if self.cell is None else self.cell.level,
            "dim": None if self.cell is None else self.cell.dim,
            "reason": self.reason,
            **self.extra,
        }


# ----------------------------------------------------------------------- cells
@dataclass(frozen=True, order=True)
class Cell:
    """A cell of the cubical complex: a vertical or top face at some level."""

    level: int
    top: bool
    vertex: tuple[int, ...]
    axes: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.axes) + (0 if self.top else 1)

    def free(self, m: int) -> list[int]:
        return list(self.axes) + ([] if self.top else [m - 1])

    def box(self, D: DyadicDecomposition) -> tuple[np.ndarray, np.ndarray]:
        s = 2.0 ** self.level
        lo = D.shift(self.level) + s * np.asarray(self.vertex, dtype=float)
        hi = lo.copy()
        for i in self.axes:
            hi[i] += s
        if self.top:
            return np.append(lo, 2 * s), np.append(hi, 2 * s)
        return np.append(lo, s), np.append(hi, 2 * s)

    def center(self, D: DyadicDecomposition) -> np.ndarray:
        lo, hi = self.box(D)
        return 0.5 * (lo + hi)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "orientation": "TOP" if self.top else "VERTICAL",
            "vertex": list(self.vertex),
            "axes": list(self.axes),
        }


def cell_of_point(D: DyadicDecomposition, x) -> Cell:
    k, top, v, ax = point_face(D, x)
    return Cell(k, top, v, ax)


def cube_cells(D: DyadicDecomposition, c: CubeId) -> list[Cell]:
    """All cells of the closed cube, including the finer cells tiling its bottom."""
    m = D.m
    out = []
    for r in range(m):
        for axes in itertools.combinations(range(m - 1), r):
            fixed = [i for i in range(m - 1) if i not in axes]
            for bits in itertools.product((0, 1), repeat=len(fixed)):
                v = list(c.lattice)
                for i, b in zip(fixed, bits):
                    v[i] += b
                out.append(Cell(c.level, False, tuple(v), axes))
                out.append(Cell(c.level, True, tuple(v), axes))
    out.append(Cell(c.level, False, tuple(c.lattice), tuple(range(m - 1))))
    base = D.bottom_lattice(c.level, c.lattice)
    for r in range(m):
        for axes in itertools.combinations(range(m - 1), r):
            ranges = [range(b, b + 2) if i in axes else range(b, b + 3) for i, b in enumerate(base)]
            for v in itertools.product(*ranges):
                out.append(Cell(c.level - 1, True, tuple(v), axes))
    return out


def _to_local(D, cell: Cell, X) -> np.ndarray:
    lo, hi = cell.box(D)
    F = cell.free(D.m)
    if not F:
        return np.zeros((len(X), 0))
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    return (X[:, F] - c[F]) / half[F]


def _from_local(D, cell: Cell, Z) -> np.ndarray:
    lo, hi = cell.box(D)
    F = cell.free(D.m)
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    X = np.tile(c, (len(Z), 1))
    for col, i in enumerate(F):
        z = Z[:, col]
        X[:, i] = np.where(z >= 1.0, hi[i], np.where(z <= -1.0, lo[i], c[i] + half[i] * z))
    return X


def _radial(Z) -> tuple[np.ndarray, np.ndarray]:
    """(|z|_inf, z/|z|_inf with the extreme coordinate snapped to +-1)."""
    r = np.max(np.abs(Z), axis=1) if Z.shape[1] else np.zeros(len(Z))
    Y = np.zeros_like(Z)
    nz = r > 0
    Y[nz] = Z[nz] / r[nz, None]
    if Z.shape[1]:
        j = np.argmax(np.abs(Z), axis=1)
        rows = np.nonzero(nz)[0]
        Y[rows, j[rows]] = np.sign(Z[rows, j[rows]])
    Y = np.clip(Y, -1.0, 1.0)
    return r, Y


def _normalize(v) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ----------------------------------------------------------------------- fills
class Fill:
    kind = "fill"

    def __call__(self, Z, f) -> np.ndarray:
        raise NotImplementedError


class ConstantFill(Fill):
    kind = "constant"

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def __call__(self, Z, f):
        return np.tile(self.value, (len(Z), 1))


class PathFill(Fill):
    """Constant-speed great-circle path a -> e turning by ``delta`` in the plane (a, w)."""

    kind = "path"

    def __init__(self, a, e, w, delta: float):
        self.a = np.asarray(a, float)
        self.e = np.asarray(e, float)
        self.w = np.asarray(w, float)
        self.delta = float(delta)

    def __call__(self, Z, f):
        t = (Z[:, 0] + 1.0) / 2.0
        out = np.cos(t * self.delta)[:, None] * self.a + np.sin(t * self.delta)[:, None] * self.w
        out[t <= 0.0] = self.a
        out[t >= 1.0] = self.e
        return out


class HomogeneousFill(Fill):
    """F(z) = f(z / |z|_inf); undefined at the centre."""

    kind = "homogeneous"

    def __call__(self, Z, f):
        r, Y = _radial(Z)
        out = np.full((len(Z), 0), np.nan)
        nz = r > 0
        vals = f(Y[nz]) if np.any(nz) else None
        nu = vals.shape[1] if vals is not None else None
        if nu is None:
            raise GeometryError("homogeneous extension evaluated only at its centre")
        out = np.full((len(Z), nu), np.nan)
        out[nz] = vals
        return out


class ConeFill(Fill):
    """Projected segment from a centre value to the boundary values."""

    kind = "cone"

    def __init__(self, center):
        self.c = np.asarray(center, float)

    def __call__(self, Z, f):
        r, Y = _radial(Z)
        out = np.tile(self.c, (len(Z), 1))
        nz = r > 0
        if np.any(nz):
            b = f(Y[nz])
            out[nz] = _normalize((1.0 - r[nz, None]) * self.c + r[nz, None] * b)
            out[r >= 1.0] = b[r[nz] >= 1.0]
        return out


class LiftedConeFill(Fill):
    """Circle-valued fill of a square from a lifted boundary angle with zero winding."""

    kind = "lifted-cone"

    def __init__(self, phis, thetas, theta_c):
        self.phis = np.asarray(phis, float)
        self.thetas = np.asarray(thetas, float)
        self.theta_c = float(theta_c)

    def __call__(self, Z, f):
        r, Y = _radial(Z)
        out = np.tile([math.cos(self.theta_c), math.sin(self.theta_c)], (len(Z), 1))
        nz = r > 0
        if np.any(nz):
            b = f(Y[nz])
            phi = np.arctan2(Y[nz, 1], Y[nz, 0])
            ti = np.interp(phi, self.phis, self.thetas)
            th = ti + _wrap(np.arctan2(b[:, 1], b[:, 0]) - ti)
            ang = (1.0 - r[nz]) * self.theta_c + r[nz] * th
            vals = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            vals[r[nz] >= 1.0] = b[r[nz] >= 1.0]
            out[nz] = vals
        return out


class StereoFill(Fill):
    """Cone in stereographic coordinates from a point q missed by the boundary image."""

    kind = "stereographic"

    def __init__(self, q):
        self.q = np.asarray(q, float)

    def _to(self, y):
        d = y @ self.q
        return (y - d[:, None] * self.q) / (1.0 - d)[:, None]

    def _back(self, w):
        n2 = np.sum(w * w, axis=1)
        return (2.0 * w + (n2 - 1.0)[:, None] * self.q) / (n2 + 1.0)[:, None]

    def __call__(self, Z, f):
        r, Y = _radial(Z)
        out = np.tile(-self.q, (len(Z), 1))
        nz = r > 0
        if np.any(nz):
            b = f(Y[nz])
            vals = self._back(r[nz, None] * self._to(b))
            vals[r[nz] >= 1.0] = b[r[nz] >= 1.0]
            out[nz] = vals
        return out


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def _perpendicular(a) -> np.ndarray:
    e = np.zeros_like(a)
    e[int(np.argmin(np.abs(a)))] = 1.0
    w = e - (e @ a) * a
    return w / np.linalg.norm(w)


def geodesic_path(a, e) -> PathFill:
    a = np.asarray(a, float)
    e = np.asarray(e, float)
    d = float(np.clip(a @ e, -1.0, 1.0))
    if d > 1.0 - 1e-15:
        return PathFill(a, e, _perpendicular(a), 0.0)
    if d < -1.0 + 1e-12:
        return PathFill(a, e, _perpendicular(a), math.pi)
    w = e - d * a
    return PathFill(a, e, w / np.linalg.norm(w), math.acos(d))


def circle_path(a, e, delta: float) -> PathFill:
    a = np.asarray(a, float)
    return PathFill(a, e, np.array([-a[1], a[0]]), delta)


def boundary_grid(j: int, s: int) -> np.ndarray:
    """Points on the facets of [-1,1]^j, ``s`` per free axis."""
    t = np.linspace(-1.0, 1.0, s)
    pts = []
    for i in range(j):
        for sgn in (-1.0, 1.0):
            g = np.stack(np.meshgrid(*([t] * (j - 1)), indexing="ij"), axis=-1).reshape(-1, j - 1) if j > 1 else np.zeros((1, 0))
            P = np.insert(g, i, sgn, axis=1)
            pts.append(P)
    return np.unique(np.concatenate(pts), axis=0)


def square_loop(K: int) -> tuple[np.ndarray, np.ndarray]:
    phis = -np.pi + 2 * np.pi * np.arange(K) / K
    c, s = np.cos(phis), np.sin(phis)
    r = np.maximum(np.abs(c), np.abs(s))
    Y = np.stack([c / r, s / r], axis=1)
    return phis, np.clip(Y, -1.0, 1.0)


def loop_lift(values) -> tuple[np.ndarray, int]:
    """Unwrapped angles of a closed sampled loop and its winding number."""
    ang = np.arctan2(values[:, 1], values[:, 0])
    closed = np.unwrap(np.append(ang, ang[0]))
    winding = int(round((closed[-1] - closed[0]) / (2 * np.pi)))
    return closed[:-1], winding


def make_face_fill(
    f: Callable,
    j: int,
    target: TargetManifold,
    samples: int = 24,
    seed: int = 0,
    cell: Cell | None = None,
) -> Fill:
    """Constructive fill of [-1,1]^j from boundary values f (j >= 2)."""
    if j < 2:
        raise ValueError("face fills need j >= 2; edges use geodesic paths")
    Y = boundary_grid(j, samples)
    vals = np.asarray(f(Y), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise NoFill("boundary values undefined", cell)
    mean = vals.mean(axis=0)
    if np.linalg.norm(mean) > 1e-9:
        c = mean / np.linalg.norm(mean)
        if float(np.min(vals @ c)) > 0.05:
            return ConeFill(c)
    if target.n == 1:
        if j != 2:
            raise NoFill(f"unsupported: circle target on a {j}-face with scattered boundary values", cell)
        K = 8 * samples
        phis, L = square_loop(K)
        thetas, w = loop_lift(np.asarray(f(L), float))
        if w != 0:
            raise NoFill(f"boundary loop has winding number {w}", cell, winding=w)
        phis_ext = np.concatenate([phis - 2 * np.pi, phis, phis + 2 * np.pi])
        th_ext = np.concatenate([thetas, thetas, thetas])
        return LiftedConeFill(phis_ext, th_ext, float(np.mean(thetas)))
    if j - 1 < target.n:
        rng = np.random.default_rng(seed)
        cand = [_normalize(rng.normal(size=(256, target.nu)))]
        if np.linalg.norm(mean) > 1e-9:
            cand.append(-mean[None] / np.linalg.norm(mean))
        cand = np.concatenate(cand)
        score = np.min(np.arccos(np.clip(cand @ vals.T, -1, 1)), axis=1)
        q = cand[int(np.argmax(score))]
        if float(np.max(score)) < 1e-3:
            raise NoFill("no point of the sphere avoids the sampled boundary image", cell)
        return StereoFill(q)
    raise NoFill(f"unsupported target/dimension: pi_{j - 1} of S^{target.n} is not handled constructively", cell)


def homogeneous_extend(f: Callable, j: int | None = None) -> Callable:
    """F(z) = f(z/|z|_inf) on [-1,1]^j minus the centre."""
    H = HomogeneousFill()

    def F(Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if j is not None and Z.shape[1] != j:
            raise ValueError("dimension mismatch")
        return H(Z, f)

    return F


def face_fill_constructive(f: Callable, j: int, target: TargetManifold, samples: int = 24, seed: int = 0) -> Callable:
    """Standalone constructive fill of [-1,1]^j; edges (j = 1) use the shortest geodesic."""
    if j == 1:
        a, e = np.asarray(f(np.array([[-1.0], [1.0]])), float)
        fill: Fill = geodesic_path(a, e)
    else:
        fill = make_face_fill(f, j, target, samples, seed)

    def G(Z):
        return fill(np.atleast_2d(np.asarray(Z, dtype=float)), f)

    G.fill = fill
    return G


# ----------------------------------------------------------------------- field
class ExtensionField:
    """U on the union of region cubes, minus the dual skeleton inside singular cubes."""

    def __init__(
        self,
        D: DyadicDecomposition,
        region: Iterable[CubeId],
        sing: Iterable[CubeId],
        target: TargetManifold,
        W_reg: Callable,
        ell: int,
        p: float | None = None,
        base_point=None,
        W_skel: Callable | None = None,
        samples: int = 24,
        meta: dict | None = None,
    ):
        self.D = D
        self.m = D.m
        self.region = set(region)
        self.sing = set(sing) & self.region
        self.regular = self.region - self.sing
        self.target = target
        self.W_reg = W_reg
        self.W_skel = W_skel
        self.ell = min(int(ell), D.m)
        self.p = p
        b = np.zeros(target.nu)
        b[0] = 1.0
        self.b = b if base_point is None else _normalize(np.asarray(base_point, float))
        self.samples = samples
        self.meta = dict(meta or {})
        self.fills: dict[Cell, Fill | None] = {}
        self.fallbacks: list[dict] = []
        self._shifts = {k: D.shift(k) for k in range(D.k_min - 1, D.k_max + 2)}
        for c in sorted(self.sing):
            for cell in cube_cells(D, c):
                if cell not in self.fills and not self._cell_is_regular(cell):
                    self.fills[cell] = None

    # ------------------------------------------------------------ structure
    def _cell_is_regular(self, cell: Cell) -> bool:
        return any(q in self.regular for q in self.D.cubes_containing(cell.center(self.D)))

    def singular_cells(self, dim: int | None = None) -> list[Cell]:
        return sorted(c for c in self.fills if dim is None or c.dim == dim)

    def build(self) -> "ExtensionField":
        """Construct every fill up to dimension ell; NO_FILL surfaces here."""
        for j in range(0, self.ell + 1):
            for cell in self.singular_cells(j):
                self._fill(cell)
        return self

    def _fill(self, cell: Cell) -> Fill:
        f = self.fills.get(cell)
        if f is not None:
            return f
        if cell not in self.fills:
            raise GeometryError(f"cell {cell.to_dict()} is outside the extension domain")
        j = cell.dim
        if j == 0:
            f = ConstantFill(self.b)
        elif j > self.ell:
            f = HomogeneousFill()
        elif j == 1:
            f = self._edge_fill(cell)
        else:
            seed = zlib.crc32(repr(cell).encode())
            f = make_face_fill(lambda Y: self._boundary(cell, Y), j, self.target, self.samples, seed, cell)
        self.fills[cell] = f
        return f

    def _boundary(self, cell: Cell, Y) -> np.ndarray:
        return self(_from_local(self.D, cell, Y))

    def _edge_fill(self, cell: Cell) -> Fill:
        a, e = self._boundary(cell, np.array([[-1.0], [1.0]]))
        if self.target.n == 1 and self.ell > 1 and self.W_skel is not None:
            # keep the homotopy class of W along the edge
            t = np.linspace(-1.0, 1.0, 65)[:, None]
            X = _from_local(self.D, cell, t)
            try:
                w = np.array([self.W_skel(x) for x in X])
            except ProjectionOutOfRange as exc:
                self.fallbacks.append({"face": cell.to_dict(), "reason": str(exc)})
                return geodesic_path(a, e)
            ang = np.arctan2(w[:, 1], w[:, 0])
            inc = float(np.sum(_wrap(np.diff(ang))))
            delta = (
                float(_wrap(ang[0] - math.atan2(a[1], a[0])))
                + inc
                + float(_wrap(math.atan2(e[1], e[0]) - ang[-1]))
            )
            return circle_path(a, e, delta)
        return geodesic_path(a, e)

    # ----------------------------------------------------------- evaluation
    def regular_mask(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mask = np.zeros(len(X), dtype=bool)
        mant, ex = np.frexp(X[:, -1])
        lev = ex - 1
        for k in np.unique(lev):
            idx = np.nonzero(lev == k)[0]
            k = int(k)
            s = 2.0 ** k
            sh = self._shifts.get(k)
            if sh is None:
                sh = self.D.shift(k)
            R = (X[idx, :-1] - sh) / s
            Rn = np.round(R)
            on = np.abs(R - Rn) <= 1e-9 * np.maximum(1.0, np.abs(R))
            fast = ~np.any(on, axis=1) & (mant[idx] != 0.5)
            F = np.floor(R).astype(int)
            for row, i in enumerate(idx):
                if fast[row]:
                    mask[i] = CubeId(k, tuple(F[row].tolist())) in self.regular
                else:
                    mask[i] = any(c in self.regular for c in self.D.cubes_containing(X[i]))
        return mask

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full((len(X), self.target.nu), np.nan)
        if len(X) == 0:
            return out
        reg = self.regular_mask(X)
        if np.any(reg):
            out[reg] = self.W_reg(X[reg])
        groups: dict[Cell, list[int]] = {}
        for i in np.nonzero(~reg)[0]:
            groups.setdefault(cell_of_point(self.D, X[i]), []).append(int(i))
        for cell, ii in groups.items():
            fill = self._fill(cell)
            Z = _to_local(self.D, cell, X[ii])
            out[ii] = fill(Z, lambda Y, cell=cell: self._boundary(cell, Y))
        return out

    def dual_skeleton(self) -> DualSkeleton | None:
        if self.ell >= self.m:
            return None
        if not hasattr(self, "_dual"):
            self._dual = DualSkeleton(self.D, self.m - self.ell - 1, self.sing)
        return self._dual

    def counts(self) -> dict[int, int]:
        out = {k: 0 for k in self.D.levels()}
        for c in self.sing:
            out[c.level] += 1
        return out

    def weighted_size(self, p: float) -> float:
        return float(sum(n * 2.0 ** (k * (self.m - p)) for k, n in self.counts().items()))


def skeleton_extend(
    D: DyadicDecomposition,
    region: Iterable[CubeId],
    sing: Iterable[CubeId],
    target: TargetManifold,
    W_reg: Callable,
    ell: int,
    p: float | None = None,
    base_point=None,
    W_skel: Callable | None = None,
    samples: int = 24,
    meta: dict | None = None,
) -> ExtensionField:
    if p is not None and ell < D.m and not ell > p - 1:
        raise ValueError(f"ell={ell} must exceed p-1={p - 1} unless ell = m")
    U = ExtensionField(D, region, sing, target, W_reg, ell, p, base_point, W_skel, samples, meta)
    return U.build()


# --------------------------------------------------------------------- energy
def _fd_gradient_norm(f: Callable, P: np.ndarray, step: np.ndarray) -> np.ndarray:
    m = P.shape[1]
    stencil = []
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        stencil.append(P + step[:, None] * e)
        stencil.append(P - step[:, None] * e)
    vals = np.asarray(f(np.concatenate(stencil)), dtype=float)
    vals = vals.reshape(2 * m, len(P), -1)
    sq = np.zeros(len(P))
    for i in range(m):
        g = (vals[2 * i] - vals[2 * i + 1]) / (2 * step[:, None])
        sq += np.sum(g * g, axis=1)
    return np.sqrt(sq)


def _midpoints(lo, hi, n: int) -> np.ndarray:
    m = len(lo)
    t = (np.arange(n) + 0.5) / n
    g = np.stack(np.meshgrid(*([t] * m), indexing="ij"), axis=-1).reshape(-1, m)
    return lo + (hi - lo) * g


def box_energy(f: Callable, boxes, p: float, n: int = 4, fd: float = 1e-4) -> float:
    """Midpoint quadrature of |Df|^p over a list of boxes (lo, hi)."""
    if not boxes:
        return 0.0
    P, W, S = [], [], []
    for lo, hi in boxes:
        pts = _midpoints(lo, hi, n)
        P.append(pts)
        W.append(np.full(len(pts), float(np.prod(hi - lo)) / len(pts)))
        S.append(np.full(len(pts), fd * float(np.min(hi - lo))))
    P, W, S = np.concatenate(P), np.concatenate(W), np.concatenate(S)
    g = _fd_gradient_norm(f, P, S)
    if not np.all(np.isfinite(g)):
        raise ValueError("quadrature touches the dual skeleton")
    return float(np.sum(W * g ** p))


def _refined_boxes(lo, hi, dual: DualSkeleton | None, rings: int) -> list:
    boxes = [(lo, hi)]
    if dual is None:
        return boxes
    for _ in range(rings):
        nxt = []
        for a, b in boxes:
            c = 0.5 * (a + b)
            if dual.distance(c) <= 0.5 * float(np.linalg.norm(b - a)):
                for bits in itertools.product((0, 1), repeat=len(a)):
                    bits = np.array(bits)
                    nxt.append((np.where(bits, c, a), np.where(bits, b, c)))
            else:
                nxt.append((a, b))
        boxes = nxt
    return boxes


def energy(
    U,
    p: float,
    region: Iterable[CubeId] | None = None,
    n: int = 4,
    rings: int = 4,
    fd: float = 1e-4,
    D: DyadicDecomposition | None = None,
    extrapolate: bool = True,
) -> float:
    """Integral of |DU|^p over the given cubes (default: the whole region)."""
    return sum(energy_by_cube(U, p, region, n, rings, fd, D, extrapolate).values())


def energy_by_cube(U, p, region=None, n=4, rings=4, fd=1e-4, D=None, extrapolate=True) -> dict[CubeId, float]:
    """Per-cube energies.

    Near the dual skeleton the unresolved part of the integral shrinks by
    q = 2^{-(ell+1-p)} per refinement ring, so with ``extrapolate`` the
    estimates at ``rings`` and ``rings - 1`` are combined to remove that tail.
    """
    if isinstance(U, ExtensionField):
        D = U.D
        cubes = sorted(U.region if region is None else region)
        dual = U.dual_skeleton()
        if dual is not None and not U.ell + 1 - p > 0:
            raise ValueError(f"|DU|^p is not integrable near the dual skeleton (ell+1-p = {U.ell + 1 - p})")
        sing = U.sing
    else:
        if D is None or region is None:
            raise ValueError("a plain callable needs a decomposition and a cube list")
        cubes, dual, sing = sorted(region), None, set()
    out = {}
    plain = [c for c in cubes if c not in sing or dual is None]
    chunk = 256
    for a in range(0, len(plain), chunk):
        group = plain[a:a + chunk]
        boxes = [D.cube_box(c) for c in group]
        P = [_midpoints(lo, hi, n) for lo, hi in boxes]
        vals = _batched_energy(U, P, boxes, p, fd)
        out.update(zip(group, vals))
    for c in cubes:
        if c in out:
            continue
        lo, hi = D.cube_box(c)
        nn = max(2, n // 2)
        e = box_energy(U, _refined_boxes(lo, hi, dual, rings), p, n=nn, fd=fd)
        if extrapolate and rings >= 1:
            q = 2.0 ** (-(U.ell + 1 - p))
            coarse = box_energy(U, _refined_boxes(lo, hi, dual, rings - 1), p, n=nn, fd=fd)
            e += (e - coarse) * q / (1.0 - q)
        out[c] = e
    return out


def _batched_energy(f, P, boxes, p, fd) -> list[float]:
    sizes = [len(x) for x in P]
    allP = np.concatenate(P)
    steps = np.concatenate([np.full(len(x), fd * float(np.min(hi - lo))) for x, (lo, hi) in zip(P, boxes)])
    g = _fd_gradient_norm(f, allP, steps)
    if not np.all(np.isfinite(g)):
        raise ValueError("quadrature touches the dual skeleton")
    out, a = [], 0
    for sz, (lo, hi) in zip(sizes, boxes):
        out.append(float(np.mean(g[a:a + sz] ** p) * np.prod(hi - lo)))
        a += sz
    return out


def lipschitz_number(f: Callable, X, step: float | np.ndarray = 1e-6) -> np.ndarray:
    """Spectral norm of the central-difference Jacobian of f at each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N, d = X.shape
    h = np.broadcast_to(np.asarray(step, float), (N,))
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        fp = np.asarray(f(X + h[:, None] * e), float)
        fm = np.asarray(f(X - h[:, None] * e), float)
        cols.append((fp - fm) / (2 * h[:, None]))
    J = np.stack(cols, axis=2)  # N, nu, d
    return np.linalg.norm(J, ord=2, axis=(1, 2))


# ---------------------------------------------------------------- trace defect
@dataclass
class TraceDefect:
    eps: list[float]
    measure: list[float]
    ratio: list[float]
    lp_distance: list[float]
    halving_factors: list[float] = field(default_factory=list)
    lp_slope: float | None = None

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "measure": self.measure,
            "measure_over_eps": self.ratio,
            "lp_distance": self.lp_distance,
            "halving_factors": self.halving_factors,
            "lp_slope": self.lp_slope,
        }


def trace_defect(
    U: ExtensionField,
    u: BoundaryMap,
    eps: Iterable[float],
    p: float,
    phi=None,
    n: int = 4,
    tol: float = 1e-9,
    window=None,
    grid: int = 64,
) -> TraceDefect:
    """measure{x_m < eps : |U - V| > dist(V, N)} / eps and the L^p distance of U(., eps) to u."""
    if phi is None:
        phi = mollifier(u.bdim)
    eps = sorted((float(e) for e in eps), reverse=True)
    D = U.D
    m = D.m
    if window is None:
        c = 0.5 * (u.lo + u.hi)
        half = 0.25 * (u.hi - u.lo)
        window = (c - half, c + half)
    wlo, whi = (np.asarray(w, float) for w in window)
    cubes = sorted(U.region)
    # per-cube indicator fractions, computed once
    frac = {}
    for a in range(0, len(cubes), 128):
        group = cubes[a:a + 128]
        P = np.concatenate([_midpoints(*D.cube_box(c), n) for c in group])
        V = extension_eval(u, phi, P)
        UV = U(P)
        dist = u.target.dist_to(V)
        A = np.linalg.norm(UV - V, axis=1) > dist * (1.0 + tol) + tol
        A = A.reshape(len(group), -1).mean(axis=1)
        frac.update(zip(group, A))
    t = (np.arange(grid) + 0.5) / grid
    G = np.stack(np.meshgrid(*([t] * (m - 1)), indexing="ij"), axis=-1).reshape(-1, m - 1)
    Xp = wlo + (whi - wlo) * G
    area = float(np.prod(whi - wlo))
    ref = u.sample(Xp)
    meas, ratio, lp = [], [], []
    for e in eps:
        vol = 0.0
        for c in cubes:
            lo, hi = D.cube_box(c)
            if hi[-1] <= e:
                vol += frac[c] * float(np.prod(hi - lo))
        meas.append(vol)
        ratio.append(vol / e)
        vals = U(np.column_stack([Xp, np.full(len(Xp), e)]))
        diff = np.linalg.norm(vals - ref, axis=1)
        lp.append(float((np.mean(diff ** p) * area) ** (1.0 / p)))
    halving = [ratio[i] / ratio[i + 1] if ratio[i + 1] > 0 else math.inf for i in range(len(ratio) - 1)]
    slope = None
    pos = [(e, d) for e, d in zip(eps, lp) if d > 0]
    if len(pos) >= 2:
        slope = float(np.polyfit(np.log([a for a, _ in pos]), np.log([b for _, b in pos]), 1)[0])
    return TraceDefect(eps, meas, ratio, lp, halving, slope)


# ------------------------------------------------------------------- pipelines
@dataclass
class PipelineConfig:
    level_range: tuple[int, int] = (-6, -1)
    delta_N: float = 0.5
    delta_star: float | None = None
    density: int = 3
    samples: int = 24
    seed: int = 0
    base_point: tuple | None = None
    increments: dict | None = None
    ell: int | None = None
    k0: int | None = None


def _projected(u: BoundaryMap, phi) -> Callable:
    def W(X):
        return u.target.project(extension_eval(u, phi, X))

    return W


def assemble_supercritical(u: BoundaryMap, p: float, config: PipelineConfig | None = None) -> ExtensionField:
    cfg = config or PipelineConfig()
    m = u.m
    if not p > m:
        raise ValueError("the supercritical pipeline needs p > m")
    missing = [j for j in range(1, m) if not u.target.homotopy_trivial(j)]
    if missing:
        raise NoFill(f"unsupported target: pi_{missing[0]} of {u.target.kind} is not trivial")
    phi = mollifier(u.bdim)
    D = DyadicDecomposition(m, *cfg.level_range, cfg.increments)
    region = cubes_over_domain(D, u.domain)
    cl = classify(D, u, phi, cfg.delta_N, cfg.density, region, cfg.delta_star)
    bad = cl.bad
    k0 = cfg.k0 if cfg.k0 is not None else min((c.level for c in bad), default=D.k_min)
    S = supercritical_propagate(D, bad, k0)
    W = _projected(u, phi)
    meta = {"pipeline": "supercritical", "k0": k0, "classification": cl, "complex": S, "phi": phi,
            "ell_construction": m}
    return skeleton_extend(D, region, S.sing, u.target, W, m, p, cfg.base_point, None, cfg.samples, meta)


def construction_dims(p: float, m: int) -> tuple[int, int]:
    """(ell used for the singular complex, ell used for the skeleton fills)."""
    if float(p).is_integer():
        return int(p) - 1, min(int(p), m)
    return int(math.floor(p)), int(math.floor(p))


def assemble_subcritical(u: BoundaryMap, p: float, config: PipelineConfig | None = None) -> ExtensionField:
    cfg = config or PipelineConfig()
    m = u.m
    if not 1 < p <= m:
        raise ValueError("the subcritical pipeline needs 1 < p <= m")
    ell_c, ell = construction_dims(p, m)
    if cfg.ell is not None:
        ell = cfg.ell
    phi = mollifier(u.bdim)
    D0 = DyadicDecomposition(m, *cfg.level_range, cfg.increments)
    region0 = cubes_over_domain(D0, u.domain)
    cl = classify(D0, u, phi, cfg.delta_N, cfg.density, region0, cfg.delta_star)
    bad = BadRegion.from_classification(cl)
    Sigma = u.singular_set
    usable = Sigma is not None and not Sigma.empty and Sigma.dim <= m - ell_c - 2
    bounds = (u.lo, u.hi)
    if usable:
        cone = neat_cone_kappa(u, phi, cl.delta_star, bad, classification=cl)
        spawn = spawn_over_singular_set(Sigma, cone.kappa, ell_c, D0, bounds, cfg.seed)
    else:
        cone = None
        spawn = spawn_over_singular_set(None, 1.0, ell_c, D0, bounds, cfg.seed)
    Dinf = spawn.decomposition
    sing_inf = spawn.cubes
    def admissible(k0: int) -> bool:
        # bad cubes below k0 must already be singular
        for k in range(Dinf.k_min, k0):
            if any(c not in sing_inf for c in bad.cubes_meeting(Dinf, k)):
                return False
        return True

    counts = cl.counts()

    def bad_weight(k0: int) -> float:
        return sum(n * 2.0 ** (k * (m - p)) for k, n in counts.items() if k >= k0)

    if cfg.k0 is not None:
        k0 = cfg.k0
    elif usable:
        k0 = choose_k0(spawn.M, bad_weight, ell_c, p, Dinf.levels(), admissible)
    else:
        k0 = max(k for k in Dinf.levels() if admissible(k))
    if usable:
        psi_inf = spawn.psi
    else:
        def psi_inf(x, k0=k0):
            x = np.array(x, dtype=float)
            x[-1] = min(x[-1], 2.0 ** k0)
            return x
    S = propagate_and_decay(Dinf, sing_inf, bad, ell_c, k0, psi_inf)
    region = cubes_over_domain(S.D, u.domain)
    W = _projected(u, phi)

    def W_skel(x):
        return u.target.project(extension_eval(u, phi, S.psi(x)[None])[0])

    meta = {
        "pipeline": "subcritical",
        "k0": k0,
        "kappa": None if cone is None else cone.kappa,
        "neat_cone": cone,
        "M": spawn.M,
        "translate": spawn.translate.tolist(),
        "classification": cl,
        "complex": S,
        "spawn": spawn,
        "phi": phi,
        "ell_construction": ell_c,
        "singular_set_used": usable,
    }
    return skeleton_extend(S.D, region, S.sing, u.target, W, ell, p, cfg.base_point, W_skel, cfg.samples, meta)
