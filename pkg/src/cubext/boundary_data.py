"""Grid-sampled boundary maps, fixture generators and Gagliardo quadrature."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, ndimage

from .dyadic_geometry import BoxDomain, Domain
from .targets import TargetManifold, sphere

GRID_MAGIC = b"CUBEXGRID-F64LE\n"
assert len(GRID_MAGIC) == 16


@dataclass(frozen=True)
class SingularSet:
    """Union of affine subspaces of R^{m-1} given by a base point and spanning directions."""

    dim: int
    pieces: tuple[tuple[tuple[float, ...], tuple[tuple[float, ...], ...]], ...]
    bound: float = 0.0

    @property
    def empty(self) -> bool:
        return len(self.pieces) == 0

    def distance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.empty:
            return np.full(x.shape[:-1], np.inf)
        best = None
        for base, dirs in self.pieces:
            d = x - np.asarray(base)
            if dirs:
                Q, _ = np.linalg.qr(np.asarray(dirs, dtype=float).T)
                d = d - (d @ Q) @ Q.T
            r = np.linalg.norm(d, axis=-1)
            best = r if best is None else np.minimum(best, r)
        return best

    def nearest(self, x) -> np.ndarray:
        """Nearest point of the first piece (sufficient for single-piece sets)."""
        x = np.asarray(x, dtype=float)
        base, dirs = self.pieces[0]
        b = np.asarray(base, dtype=float)
        d = x - b
        if dirs:
            Q, _ = np.linalg.qr(np.asarray(dirs, dtype=float).T)
            return b + (d @ Q) @ Q.T
        return np.broadcast_to(b, x.shape).copy()

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "pieces": [{"base": list(b), "dirs": [list(v) for v in d]} for b, d in self.pieces],
            "bound": self.bound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SingularSet":
        pieces = tuple(
            (tuple(p["base"]), tuple(tuple(v) for v in p["dirs"])) for p in d.get("pieces", [])
        )
        return cls(int(d["dim"]), pieces, float(d.get("bound", 0.0)))


def no_singular_set() -> SingularSet:
    return SingularSet(-1, ())


class BoundaryMap:
    """Samples of u: Omega -> N on a cell-centred grid over a box.

    Sample ``i`` sits at ``lo + (i + 1/2) h``.  Values are ambient vectors on
    the target.  ``periodic`` identifies opposite faces of the box.
    """

    def __init__(
        self,
        target: TargetManifold,
        lo: Sequence[float],
        hi: Sequence[float],
        values: np.ndarray,
        singular_set: SingularSet | None = None,
        periodic: bool = False,
        domain: Domain | None = None,
        label: str = "",
    ):
        self.target = target
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        values = np.asarray(values, dtype=float)
        self.shape = values.shape[:-1]
        if values.shape[-1] != target.nu:
            raise ValueError("sample values must live in the target's ambient space")
        if len(self.shape) != len(self.lo):
            raise ValueError("grid dimension mismatch")
        if min(self.shape) < 2:
            raise ValueError("at least two samples per axis are required")
        norms = np.linalg.norm(values, axis=-1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("samples must lie on the target within 1e-9")
        self.values = values / norms[..., None]
        self.values.setflags(write=False)
        self.h = (self.hi - self.lo) / np.asarray(self.shape, dtype=float)
        self.singular_set = singular_set
        self.periodic = periodic
        self.domain = domain if domain is not None else BoxDomain(self.lo, self.hi)
        self.label = label

    @property
    def bdim(self) -> int:
        return len(self.shape)

    @property
    def m(self) -> int:
        return self.bdim + 1

    @property
    def spacing(self) -> float:
        return float(np.max(self.h))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def axes(self) -> list[np.ndarray]:
        return [self.lo[i] + (np.arange(n) + 0.5) * self.h[i] for i, n in enumerate(self.shape)]

    def points(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1).reshape(-1, self.bdim)

    def flat_values(self) -> np.ndarray:
        return self.values.reshape(-1, self.target.nu)

    def sample(self, y) -> np.ndarray:
        """Multilinear interpolation of the ambient samples at points y (..., m-1)."""
        y = np.asarray(y, dtype=float)
        shp = y.shape[:-1]
        flat = y.reshape(-1, self.bdim)
        coords = ((flat - self.lo) / self.h - 0.5).T
        mode = "grid-wrap" if self.periodic else "nearest"
        out = np.empty((flat.shape[0], self.target.nu))
        for c in range(self.target.nu):
            out[:, c] = ndimage.map_coordinates(self.values[..., c], coords, order=1, mode=mode)
        return out.reshape(*shp, self.target.nu)

    def with_values(self, values, label: str | None = None) -> "BoundaryMap":
        return BoundaryMap(
            self.target, self.lo, self.hi, values, self.singular_set, self.periodic, None, label or self.label
        )

    def scaled(self, lam: float) -> "BoundaryMap":
        """u_lam(x) = u(x / lam) on the dilated box with dilated grid."""
        ss = self.singular_set
        if ss is not None and not ss.empty:
            ss = SingularSet(
                ss.dim,
                tuple((tuple(lam * np.asarray(b)), d) for b, d in ss.pieces),
                ss.bound,
            )
        return BoundaryMap(
            self.target, lam * self.lo, lam * self.hi, self.values, ss, self.periodic, None, self.label
        )

    def gradient_norm(self) -> np.ndarray:
        """Frobenius norm of the central-difference gradient of the ambient samples."""
        sq = np.zeros(self.shape)
        for ax in range(self.bdim):
            g = np.gradient(self.values, self.h[ax], axis=ax)
            sq += np.sum(g * g, axis=-1)
        return np.sqrt(sq)

    def describe(self) -> dict:
        return {
            "label": self.label,
            "m": self.m,
            "nu": self.target.nu,
            "shape": list(self.shape),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "h": self.h.tolist(),
            "periodic": self.periodic,
            "singular_set": None if self.singular_set is None else self.singular_set.to_dict(),
        }


# -------------------------------------------------------------------- fixtures
def _grid_points(lo, hi, shape) -> np.ndarray:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    h = (hi - lo) / np.asarray(shape, float)
    axes = [lo[i] + (np.arange(n) + 0.5) * h[i] for i, n in enumerate(shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _embed(v: np.ndarray, nu: int) -> np.ndarray:
    if v.shape[-1] == nu:
        return v
    if v.shape[-1] > nu:
        raise ValueError("fixture values do not fit in the target")
    pad = np.zeros(v.shape[:-1] + (nu - v.shape[-1],))
    return np.concatenate([v, pad], axis=-1)


def constant_map(target: TargetManifold, m: int, n: int | Sequence[int], lo=-1.0, hi=1.0, value=None) -> BoundaryMap:
    shape = _shape(m, n)
    lo_v, hi_v = _box(m, lo, hi)
    b = np.zeros(target.nu)
    b[0] = 1.0
    if value is not None:
        b = np.asarray(value, float)
        b = b / np.linalg.norm(b)
    vals = np.broadcast_to(b, tuple(shape) + (target.nu,)).copy()
    return BoundaryMap(target, lo_v, hi_v, vals, no_singular_set(), label="constant")


def _shape(m: int, n) -> tuple[int, ...]:
    if np.ndim(n) == 0:
        return (int(n),) * (m - 1)
    shape = tuple(int(v) for v in n)
    if len(shape) != m - 1:
        raise ValueError("one resolution per boundary axis is required")
    return shape


def _box(m: int, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    lo_v = np.full(m - 1, float(lo)) if np.ndim(lo) == 0 else np.asarray(lo, float)
    hi_v = np.full(m - 1, float(hi)) if np.ndim(hi) == 0 else np.asarray(hi, float)
    return lo_v, hi_v


def winding(k: int = 1) -> Callable[[np.ndarray], np.ndarray]:
    """S^1 -> S^1, z -> z^k."""

    def f(w):
        th = np.arctan2(w[..., 1], w[..., 0])
        return np.stack([np.cos(k * th), np.sin(k * th)], axis=-1)

    f.degree = k
    f.lipschitz = abs(k)
    return f


def identity_sphere(w):
    return w


identity_sphere.lipschitz = 1.0


def two_point(w):
    """S^0 -> N, sending +-1 to +-e_1."""
    s = np.where(w[..., 0] >= 0, 1.0, -1.0)
    return np.stack([s, np.zeros_like(s)], axis=-1)


two_point.lipschitz = 0.0


def vortex_map(
    target: TargetManifold,
    f: Callable[[np.ndarray], np.ndarray],
    split: tuple[int, int],
    n: int | Sequence[int],
    lo=-1.0,
    hi=1.0,
    lipschitz: float | None = None,
) -> BoundaryMap:
    """u(x', x'') = f(x'/|x'|) with x' the first ``split[0]`` coordinates.

    The singular set is {x' = 0}; with an even cell-centred grid on a
    symmetric box no sample hits it.
    """
    a, b = split
    if a < 1 or b < 0:
        raise ValueError("split must be (lbar+1, m-2-lbar) with lbar >= 0")
    m = a + b + 1
    shape = _shape(m, n)
    lo_v, hi_v = _box(m, lo, hi)
    pts = _grid_points(lo_v, hi_v, shape)
    xp = pts[..., :a]
    r = np.linalg.norm(xp, axis=-1, keepdims=True)
    if np.any(r == 0):
        raise ValueError("a sample hits the singular set; use an even grid on a symmetric box")
    vals = _embed(np.asarray(f(xp / r), float), target.nu)
    lip = getattr(f, "lipschitz", None) if lipschitz is None else lipschitz
    dirs = tuple(tuple(float(i == j) for i in range(m - 1)) for j in range(a, m - 1))
    base = tuple(0.0 for _ in range(m - 1))
    ss = SingularSet(m - 1 - a, ((base, dirs),), float(lip or 0.0))
    return BoundaryMap(target, lo_v, hi_v, vals, ss, label=f"vortex{split}")


def smooth_circle_map(m: int, n, seed: int, lo=-1.0, hi=1.0, modes: int = 3, amplitude: float = 1.5) -> BoundaryMap:
    """e^{i theta} with theta a random trigonometric polynomial (global lifting known)."""
    shape = _shape(m, n)
    lo_v, hi_v = _box(m, lo, hi)
    pts = _grid_points(lo_v, hi_v, shape)
    theta = smooth_phase(pts, seed, modes, amplitude, lo_v, hi_v)
    vals = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    u = BoundaryMap(sphere(1), lo_v, hi_v, vals, no_singular_set(), label=f"smooth-circle-{seed}")
    u.phase = theta
    return u


def smooth_phase(pts, seed, modes, amplitude, lo_v, hi_v) -> np.ndarray:
    rng = np.random.default_rng(seed)
    width = np.asarray(hi_v) - np.asarray(lo_v)
    theta = np.zeros(pts.shape[:-1])
    for _ in range(modes):
        freq = rng.uniform(0.3, 1.2, size=pts.shape[-1]) * (2 * np.pi / width)
        phase = rng.uniform(0, 2 * np.pi)
        amp = amplitude * rng.uniform(0.3, 1.0) / modes
        theta += amp * np.sin(pts @ freq + phase)
    return theta


def smooth_sphere_map(target: TargetManifold, m: int, n, seed: int, lo=-1.0, hi=1.0, amplitude: float = 0.8) -> BoundaryMap:
    """Normalized smooth perturbation of a constant vector."""
    shape = _shape(m, n)
    lo_v, hi_v = _box(m, lo, hi)
    pts = _grid_points(lo_v, hi_v, shape)
    rng = np.random.default_rng(seed)
    width = hi_v - lo_v
    vec = np.zeros(pts.shape[:-1] + (target.nu,))
    vec[..., 0] = 1.0
    for c in range(target.nu):
        for _ in range(2):
            freq = rng.uniform(0.3, 1.0, size=m - 1) * (2 * np.pi / width)
            vec[..., c] += amplitude * rng.uniform(0.3, 1.0) * np.sin(pts @ freq + rng.uniform(0, 2 * np.pi))
    vals = vec / np.linalg.norm(vec, axis=-1, keepdims=True)
    return BoundaryMap(target, lo_v, hi_v, vals, no_singular_set(), label=f"smooth-sphere-{seed}")


# ----------------------------------------------------------- R^1 class check
def verify_r1_class(u: BoundaryMap) -> dict:
    """sup over the grid of dist(x, Sigma) |Du(x)|, excluding samples within 2h of Sigma."""
    g = u.gradient_norm().reshape(-1)
    pts = u.points()
    ss = u.singular_set
    if ss is None or ss.empty:
        return {"bound": float(np.max(g)), "excluded": 0, "weighted": False}
    d = ss.distance(pts)
    # the central difference needs both neighbours off the singular set as well
    keep = d >= 2 * u.spacing
    val = float(np.max(d[keep] * g[keep])) if np.any(keep) else 0.0
    return {"bound": val, "excluded": int(np.sum(~keep)), "weighted": True}


# --------------------------------------------------------------- Gagliardo
@dataclass
class GagliardoEstimate:
    p: float
    s: float
    value: float
    truncated_value: float
    truncated_value_p: float
    delta: float
    cutoff: float | None
    exclusion_radius: float
    grid: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    @property
    def seminorm(self) -> float:
        return self.value ** (1.0 / self.p)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "s": self.s,
            "value": self.value,
            "truncated_value": self.truncated_value,
            "truncated_value_p": self.truncated_value_p,
            "delta": self.delta,
            "cutoff": self.cutoff,
            "exclusion_radius": self.exclusion_radius,
            "grid": list(self.grid),
        }


def _pair_offsets(u: BoundaryMap, Yi: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = Yi[:, None, :] - Y[None, :, :]
    if u.periodic:
        w = u.hi - u.lo
        diff = diff - w * np.round(diff / w)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def gagliardo_seminorm(
    u: BoundaryMap,
    p: float,
    s: float | None = None,
    delta: float = 0.0,
    cutoff: float | None = None,
    block: int = 512,
) -> GagliardoEstimate:
    """Midpoint double sum over distinct sample pairs.

    Returns the double integral of d(u(y),u(z))^p / |y-z|^{(m-1)+sp}; pairs
    closer than h/2 are excluded.  ``truncated_value`` uses (d - delta)_+ and
    ``truncated_value_p`` uses (d - delta)_+^p.
    """
    if s is None:
        s = 1.0 - 1.0 / p
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    if min(u.shape) < 4:
        raise ValueError("at least four samples per axis are required")
    Y = u.points()
    V = u.flat_values()
    alpha = u.bdim + s * p
    excl = 0.5 * float(np.min(u.h))
    w = u.cell_volume ** 2
    tot = tr = trp = 0.0
    for i0 in range(0, len(Y), block):
        Yi = Y[i0:i0 + block]
        Vi = V[i0:i0 + block]
        R = _pair_offsets(u, Yi, Y)
        dot = np.clip(Vi @ V.T, -1.0, 1.0)
        dgeo = np.arccos(dot)
        mask = R >= excl
        if cutoff is not None:
            mask &= R <= cutoff
        Rm = np.where(mask, R, 1.0)
        ker = np.where(mask, Rm ** (-alpha), 0.0)
        tot += float(np.sum(dgeo ** p * ker))
        excess = np.maximum(dgeo - delta, 0.0)
        tr += float(np.sum(excess * ker))
        trp += float(np.sum(excess ** p * ker))
    return GagliardoEstimate(
        p=p, s=s, value=w * tot, truncated_value=w * tr, truncated_value_p=w * trp,
        delta=delta, cutoff=cutoff, exclusion_radius=excl, grid=tuple(u.shape),
        meta={"alpha": alpha, "block": block},
    )


def _cell_kernel_1d(n: int, h: float, alpha: float, excl: float) -> float:
    """Integral over a pair of cells at offset n of |y - z|^{-alpha} on |y - z| >= excl."""

    def g(t):
        r = abs(n * h + t)
        return (h - abs(t)) * r ** (-alpha) if r >= excl else 0.0

    pts = sorted({-h, 0.0, h, -n * h - excl, -n * h + excl})
    pts = [q for q in pts if -h < q < h]
    val, _ = integrate.quad(g, -h, h, points=pts or None, limit=200, epsabs=0.0, epsrel=1e-10)
    return val


def _cell_kernel_2d(n: tuple[int, int], h: float, alpha: float, excl: float) -> float:
    def g(t2, t1):
        r = math.hypot(n[0] * h + t1, n[1] * h + t2)
        return (h - abs(t1)) * (h - abs(t2)) * r ** (-alpha) if r >= excl else 0.0

    total = 0.0
    for a, b in ((-h, 0.0), (0.0, h)):
        for c, d in ((-h, 0.0), (0.0, h)):
            v, _ = integrate.dblquad(g, a, b, c, d, epsabs=0.0, epsrel=1e-7)
            total += v
    return total


def gagliardo_oracle(u: BoundaryMap, p: float, s: float | None = None, near: int = 2) -> float:
    """Independent estimate treating u as piecewise constant on grid cells.

    Cell-pair kernel integrals (with the same h/2 exclusion) are computed by
    adaptive quadrature per lattice offset.  In one boundary dimension every
    offset is integrated; in two, offsets with sup-norm <= ``near`` are
    integrated and farther ones use the cell-centre value.
    """
    if s is None:
        s = 1.0 - 1.0 / p
    if u.periodic:
        raise ValueError("oracle supports non-periodic grids only")
    alpha = u.bdim + s * p
    h = float(u.h[0])
    if not np.allclose(u.h, h):
        raise ValueError("oracle needs an isotropic grid")
    excl = 0.5 * h
    V = u.flat_values()
    if u.bdim == 1:
        N = u.shape[0]
        K = np.array([_cell_kernel_1d(n, h, alpha, excl) for n in range(N)])
        D = np.arccos(np.clip(V @ V.T, -1.0, 1.0)) ** p
        idx = np.abs(np.arange(N)[:, None] - np.arange(N)[None, :])
        return float(np.sum(D * K[idx]))
    if u.bdim == 2:
        nx, ny = u.shape
        cache: dict[tuple[int, int], float] = {}

        def kern(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                if max(key) <= near:
                    cache[key] = _cell_kernel_2d(key, h, alpha, excl)
                else:
                    cache[key] = h ** 4 * math.hypot(a * h, b * h) ** (-alpha)
            return cache[key]

        Kt = np.array([[kern(a, b) for b in range(ny)] for a in range(nx)])
        I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        I = I.reshape(-1)
        J = J.reshape(-1)
        total = 0.0
        for i in range(len(V)):
            d = np.arccos(np.clip(V @ V[i], -1.0, 1.0)) ** p
            total += float(np.sum(d * Kt[np.abs(I - I[i]), np.abs(J - J[i])]))
        return total
    raise ValueError("oracle supports boundary dimension 1 or 2")


# -------------------------------------------------------------------- grid io
def write_grid(u: BoundaryMap, path: str, binary: bool = False) -> None:
    header = [u.m, u.target.nu, *u.shape, *u.lo.tolist(), *u.hi.tolist()]
    flat = u.flat_values()
    if binary:
        with open(path, "wb") as fh:
            fh.write(GRID_MAGIC)
            fh.write(struct.pack(f"<{len(header)}d", *map(float, header)))
            fh.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())
        return
    with open(path, "w") as fh:
        ints = [str(int(v)) for v in header[: 2 + u.bdim]]
        flts = [repr(float(v)) for v in header[2 + u.bdim:]]
        fh.write(" ".join(ints + flts) + "\n")
        for row in flat:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_grid(path: str, target: TargetManifold | None = None) -> BoundaryMap:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head == GRID_MAGIC:
            m, nu = struct.unpack("<2d", fh.read(16))
            m, nu = int(m), int(nu)
            rest = struct.unpack(f"<{3 * (m - 1)}d", fh.read(8 * 3 * (m - 1)))
            shape = tuple(int(v) for v in rest[: m - 1])
            lo, hi = rest[m - 1: 2 * (m - 1)], rest[2 * (m - 1):]
            flat = np.frombuffer(fh.read(), dtype="<f8").reshape(-1, nu)
        else:
            fh.seek(0)
            lines = fh.read().decode().splitlines()
            tok = lines[0].split()
            m, nu = int(tok[0]), int(tok[1])
            shape = tuple(int(v) for v in tok[2: m + 1])
            lo = [float(v) for v in tok[m + 1: 2 * m]]
            hi = [float(v) for v in tok[2 * m: 3 * m - 1]]
            flat = np.array([[float(v) for v in ln.split()] for ln in lines[1:] if ln.strip()])
    if target is None:
        target = sphere(nu - 1)
    return BoundaryMap(target, lo, hi, flat.reshape(*shape, nu), no_singular_set(), label=path)
