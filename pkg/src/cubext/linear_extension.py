"""Convolution extension V of boundary data, mean oscillation and good/bad classification."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

import numpy as np
from scipy import integrate, ndimage, special

from .boundary_data import BoundaryMap
from .dyadic_geometry import CubeId, DyadicDecomposition, cubes_over_domain, in_tent


class TentViolation(ValueError):
    code = "TENT_VIOLATION"


def _unit_sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / special.gamma(d / 2)


class Mollifier:
    """Radial bump exp(-1/(1-|y|^2)) on the unit ball of R^d, normalized to unit mass."""

    def __init__(self, d: int):
        self.d = int(d)
        prof = lambda r: math.exp(-1.0 / (1.0 - r * r)) if r < 1 else 0.0
        mass, _ = integrate.quad(lambda r: prof(r) * r ** (self.d - 1), 0, 1, epsabs=1e-14, epsrel=1e-12)
        self.normalization = 1.0 / (_unit_sphere_area(self.d) * mass)
        # radial derivative of the normalized profile
        dprof = lambda r: self.normalization * prof(r) * (-2 * r / (1 - r * r) ** 2) if r < 1 else 0.0
        A, _ = integrate.quad(lambda r: abs(dprof(r)) * r ** (self.d - 1), 0, 1, limit=200)
        B, _ = integrate.quad(
            lambda r: abs(self.d * self.normalization * prof(r) + r * dprof(r)) * r ** (self.d - 1),
            0, 1, limit=200,
        )
        area = _unit_sphere_area(self.d)
        self.grad_l1 = area * A
        self.dilation_l1 = area * B

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        r2 = np.sum(y * y, axis=-1)
        out = np.zeros(r2.shape)
        inside = r2 < 1
        out[inside] = self.normalization * np.exp(-1.0 / (1.0 - r2[inside]))
        return out

    @property
    def gradient_constant(self) -> float:
        """C with |DV(x)| <= C / x_m for unit-sphere-valued data."""
        return math.hypot(self.grad_l1, self.dilation_l1)

    def c_phi(self, diam: float) -> float:
        """C_phi with |DV| <= C_phi diam / x_m."""
        return self.gradient_constant / diam

    @lru_cache(maxsize=64)
    def nodes(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Midpoint nodes of [-1,1]^d with n per axis inside the ball and weights summing to 1."""
        t = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
        grid = np.stack(np.meshgrid(*([t] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)
        w = self(grid)
        keep = w > 0
        grid, w = grid[keep], w[keep]
        return grid, w / w.sum()


@lru_cache(maxsize=8)
def mollifier(d: int) -> Mollifier:
    return Mollifier(d)


def _node_count(xm: float, h: float) -> int:
    return max(16, int(math.ceil(2.0 * xm / min(h, xm / 8.0))))


def _check_tent(u: BoundaryMap, X: np.ndarray) -> None:
    ok = in_tent(u.domain, X)
    if not np.all(ok):
        bad = X[~ok][0]
        raise TentViolation(f"{TentViolation.code}: ball around {bad.tolist()} leaves the domain")


def extension_eval(u: BoundaryMap, phi: Mollifier | None, x, chunk: int = 2_000_000) -> np.ndarray:
    """V(x) = sum_j w_j u(x' - x_m y_j) for points x (..., m)."""
    return _average(u, u.sample, u.target.nu, phi, x, chunk)


def extend_samples(u: BoundaryMap, samples, phi: Mollifier | None, x, chunk: int = 2_000_000) -> np.ndarray:
    """Apply the same averaging operator to other data on the grid of ``u``.

    ``samples`` has shape u.shape + (c,); the result has shape (..., c).
    """
    vals = np.asarray(samples, dtype=float)
    if vals.shape[:-1] != tuple(u.shape):
        raise ValueError("samples must live on the grid of u")
    mode = "grid-wrap" if u.periodic else "nearest"

    def sampler(y):
        y = np.asarray(y, dtype=float)
        shp = y.shape[:-1]
        coords = ((y.reshape(-1, u.bdim) - u.lo) / u.h - 0.5).T
        out = np.stack([ndimage.map_coordinates(vals[..., c], coords, order=1, mode=mode)
                        for c in range(vals.shape[-1])], axis=-1)
        return out.reshape(*shp, vals.shape[-1])

    return _average(u, sampler, vals.shape[-1], phi, x, chunk)


def _average(u: BoundaryMap, sampler, nu: int, phi: Mollifier | None, x, chunk: int) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    shp = X.shape[:-1]
    X = X.reshape(-1, u.m)
    if phi is None:
        phi = mollifier(u.bdim)
    _check_tent(u, X)
    out = np.empty((len(X), nu))
    h = float(np.min(u.h))
    xm = X[:, -1]
    counts = np.maximum(16, np.ceil(2.0 * xm / np.minimum(h, xm / 8.0))).astype(int)
    for n in np.unique(counts):
        idx = np.nonzero(counts == n)[0]
        Y, w = phi.nodes(int(n))
        step = max(1, chunk // len(Y))
        for a in range(0, len(idx), step):
            sel = idx[a:a + step]
            P = X[sel, None, :-1] - X[sel, None, -1:] * Y[None, :, :]
            vals = sampler(P)
            out[sel] = np.einsum("ijk,j->ik", vals, w)
    return out.reshape(*shp, nu)


def extension_gradient(u: BoundaryMap, phi: Mollifier | None, x) -> np.ndarray:
    """Central-difference gradient with step x_m/16; shape (..., m, nu)."""
    X = np.asarray(x, dtype=float)
    shp = X.shape[:-1]
    X = X.reshape(-1, u.m)
    step = X[:, -1] / 16.0
    stencil = []
    for i in range(u.m):
        e = np.zeros(u.m)
        e[i] = 1.0
        stencil.append(X + step[:, None] * e)
        stencil.append(X - step[:, None] * e)
    vals = extension_eval(u, phi, np.concatenate(stencil))
    vals = vals.reshape(2 * u.m, len(X), u.target.nu)
    G = np.empty((len(X), u.m, u.target.nu))
    for i in range(u.m):
        G[:, i, :] = (vals[2 * i] - vals[2 * i + 1]) / (2 * step[:, None])
    return G.reshape(*shp, u.m, u.target.nu)


def mean_oscillation(u: BoundaryMap, x, delta: float) -> float:
    """Ball-pair average of (d(u(y), u(z)) - delta)_+ over B_{x_m}(x')."""
    x = np.asarray(x, dtype=float)
    _check_tent(u, x[None])
    xm = float(x[-1])
    spacing = max(float(np.min(u.h)), xm / 16.0)
    n = max(2, int(math.ceil(2.0 * xm / spacing)))
    t = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    grid = np.stack(np.meshgrid(*([t] * u.bdim), indexing="ij"), axis=-1).reshape(-1, u.bdim)
    grid = grid[np.sum(grid * grid, axis=-1) < 1.0]
    vals = u.target.normalize(u.sample(x[:-1] + xm * grid))
    d = u.target.geodesic_distance(vals[:, None, :], vals[None, :, :])
    return float(np.mean(np.maximum(d - delta, 0.0)))


# --------------------------------------------------------------- classification
@dataclass
class Classification:
    decomposition: DyadicDecomposition
    flags: dict[CubeId, bool]  # True means BAD
    maxdist: dict[CubeId, float]
    witnesses: dict[CubeId, tuple[np.ndarray, float]]
    delta_N: float
    delta_star: float
    density: int
    bad_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    bad_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def cubes(self) -> set[CubeId]:
        return set(self.flags)

    @property
    def bad(self) -> set[CubeId]:
        return {c for c, b in self.flags.items() if b}

    @property
    def good(self) -> set[CubeId]:
        return {c for c, b in self.flags.items() if not b}

    def counts(self) -> dict[int, int]:
        out = {k: 0 for k in self.decomposition.levels()}
        for c, b in self.flags.items():
            if b:
                out[c.level] += 1
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        m = self.decomposition.m
        wr.writerow(["level"] + [f"zeta{i}" for i in range(m - 1)] + ["flag"]
                    + [f"witness_x{i}" for i in range(m)] + ["witness_dist"])
        for c in sorted(self.flags):
            if self.flags[c]:
                wx, wd = self.witnesses[c]
                wr.writerow([c.level, *c.lattice, "BAD", *[repr(float(v)) for v in wx], repr(float(wd))])
            else:
                wr.writerow([c.level, *c.lattice, "GOOD"] + [""] * (m + 1))
        return buf.getvalue()


def cube_samples(D: DyadicDecomposition, c: CubeId, n: int) -> np.ndarray:
    lo, hi = D.cube_box(c)
    t = np.linspace(0.0, 1.0, n)
    grid = np.stack(np.meshgrid(*([t] * D.m), indexing="ij"), axis=-1).reshape(-1, D.m)
    return lo + (hi - lo) * grid


def refine_density(n: int, factor: int) -> int:
    """Nested sample count per axis for a ``factor``-times denser grid."""
    return factor * (n - 1) + 1


def classify(
    D: DyadicDecomposition,
    u: BoundaryMap,
    phi: Mollifier | None,
    delta_N: float,
    sample_density: int = 3,
    cubes: Iterable[CubeId] | None = None,
    delta_star: float | None = None,
) -> Classification:
    """Flag a cube BAD iff some sample has dist(V, N) > delta_N.

    ``sample_density`` is the number of samples per axis including the cube
    boundary, so each cube gets sample_density^m samples.
    """
    if sample_density < 3:
        raise ValueError("at least 3 samples per axis are required")
    if phi is None:
        phi = mollifier(u.bdim)
    cube_list = sorted(cubes_over_domain(D, u.domain) if cubes is None else set(cubes))
    n = sample_density
    per = n ** D.m
    flags: dict[CubeId, bool] = {}
    maxdist: dict[CubeId, float] = {}
    wit: dict[CubeId, tuple[np.ndarray, float]] = {}
    bad_pts, bad_r = [], []
    batch = max(1, 200_000 // per)
    for a in range(0, len(cube_list), batch):
        group = cube_list[a:a + batch]
        P = np.concatenate([cube_samples(D, c, n) for c in group])
        dist = u.target.dist_to(extension_eval(u, phi, P)).reshape(len(group), per)
        P = P.reshape(len(group), per, D.m)
        for i, c in enumerate(group):
            j = int(np.argmax(dist[i]))
            maxdist[c] = float(dist[i, j])
            isbad = maxdist[c] > delta_N
            flags[c] = isbad
            if isbad:
                wit[c] = (P[i, j].copy(), maxdist[c])
                sel = dist[i] > delta_N
                bad_pts.append(P[i, sel])
                bad_r.append(np.full(int(sel.sum()), 2.0 ** c.level / (n - 1)))
    bp = np.concatenate(bad_pts) if bad_pts else np.zeros((0, D.m))
    br = np.concatenate(bad_r) if bad_r else np.zeros(0)
    return Classification(
        D, flags, maxdist, wit, delta_N,
        delta_N / 4 if delta_star is None else delta_star, n, bp, br,
    )


def weighted_size(counts: dict[int, int], m: int, p: float) -> float:
    return float(sum(cnt * 2.0 ** (k * (m - p)) for k, cnt in counts.items()))


def bad_size(c: Classification, p: float) -> dict:
    """Weighted count sum_k 2^{k(m-p)} #bad_k and the closed-form integral of x_m^{-p} over the bad cubes."""
    m = c.decomposition.m
    counts = c.counts()
    integral = 0.0
    for k, cnt in counts.items():
        a, b = 2.0 ** k, 2.0 ** (k + 1)
        if p == 1:
            seg = math.log(b / a)
        else:
            seg = (a ** (1 - p) - b ** (1 - p)) / (p - 1)
        integral += cnt * 2.0 ** (k * (m - 1)) * seg
    return {"weighted": weighted_size(counts, m, p), "integral": integral, "counts": counts}


def calibrate_c_mo(u: BoundaryMap, phi: Mollifier | None, points, delta: float) -> float:
    """Smallest C with dist(V, N) <= C (delta + MO_delta) at the given points."""
    P = np.atleast_2d(np.asarray(points, float))
    dist = u.target.dist_to(extension_eval(u, phi, P))
    ratios = [d / (delta + mean_oscillation(u, x, delta)) for x, d in zip(P, dist)]
    return float(max(ratios)) if ratios else 0.0


def cube_gradient_integral(u: BoundaryMap, phi: Mollifier | None, D: DyadicDecomposition,
                           cubes: Iterable[CubeId], p: float, n: int = 4) -> float:
    """Midpoint quadrature of |DV|^p over the given cubes."""
    total = 0.0
    t = (np.arange(n) + 0.5) / n
    grid = np.stack(np.meshgrid(*([t] * D.m), indexing="ij"), axis=-1).reshape(-1, D.m)
    for c in sorted(cubes):
        lo, hi = D.cube_box(c)
        P = lo + (hi - lo) * grid
        G = extension_gradient(u, phi, P)
        g = np.sqrt(np.sum(G * G, axis=(-1, -2)))
        total += float(np.mean(g ** p)) * float(np.prod(hi - lo))
    return total
