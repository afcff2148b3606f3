"""Scenario configuration, verification suites, the circle lifting oracle and report emission."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import boundary_data as bd
from .dyadic_geometry import (
    CubeId,
    DyadicDecomposition,
    cubes_over_domain,
    validate_descending,
)
from .linear_extension import (
    bad_size,
    calibrate_c_mo,
    classify,
    extend_samples,
    extension_eval,
    mollifier,
    cube_samples,
)
from .singular_complex import (
    BadRegion,
    ConstructionError,
    SubcriticalComplex,
    sample_skeleton_points,
    spawn_over_singular_set,
    supercritical_propagate,
)
from .skeleton_extension import (
    NoFill,
    PipelineConfig,
    _wrap,
    assemble_subcritical,
    assemble_supercritical,
    energy_by_cube,
    loop_lift,
    trace_defect,
)
from .targets import ProjectionOutOfRange, TargetManifold


# ------------------------------------------------------------------- seeding
def subseed(seed: int, label: str) -> int:
    """A 63-bit integer seed derived from the global seed and a fixed label."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def substream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, label))


# ------------------------------------------------------------------ scenario
PIPELINES = ("supercritical", "subcritical", "classify-only", "counts-only")


@dataclass
class Scenario:
    name: str
    m: int
    p: float
    target: dict = field(default_factory=lambda: {"name": "circle", "delta": 0.75})
    boundary: dict = field(default_factory=lambda: {"kind": "constant"})
    domain: dict = field(default_factory=lambda: {"lo": -1.0, "hi": 1.0, "n": 64})
    decomposition: dict = field(default_factory=lambda: {"k_min": -6, "k_max": -1, "shift_policy": "min-lex"})
    thresholds: dict = field(default_factory=lambda: {"delta_N": 0.5, "delta_star": None, "density": 3})
    pipeline: str = "classify-only"
    seed: int = 0
    trace: dict = field(default_factory=dict)
    quadrature: dict = field(default_factory=lambda: {"n": 4})
    oracle: bool = False
    expect: str | None = None
    fuzz: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.m < 2:
            raise ValueError("m must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_resolution(self, r: float) -> "Scenario":
        """Scale grid resolution by r (kept even so symmetric vortex grids avoid the singular set)."""
        d = self.to_dict()
        n = d["domain"]["n"]
        scale = lambda v: max(4, 2 * int(round(v * r / 2)))
        d["domain"]["n"] = [scale(v) for v in n] if isinstance(n, list) else scale(n)
        return Scenario.from_dict(d)

    def with_seed(self, seed: int) -> "Scenario":
        d = self.to_dict()
        d["seed"] = int(seed)
        return Scenario.from_dict(d)

    def make_target(self) -> TargetManifold:
        t = self.target
        n = 1 if t.get("name", "circle") == "circle" else int(t.get("n", 2))
        return TargetManifold(n, float(t.get("delta", 0.75)))

    def make_boundary(self) -> bd.BoundaryMap:
        b = self.boundary
        kind = b.get("kind", "constant")
        tgt = self.make_target()
        lo, hi, n = self.domain["lo"], self.domain["hi"], self.domain["n"]
        bseed = subseed(self.seed, "boundary")
        if kind == "constant":
            return bd.constant_map(tgt, self.m, n, lo, hi)
        if kind == "vortex":
            fname = b.get("map", "winding")
            f = {"winding": lambda: bd.winding(int(b.get("degree", 1))),
                 "two_point": lambda: bd.two_point,
                 "identity": lambda: bd.identity_sphere}[fname]()
            split = tuple(b.get("split", (self.m - 1, 0)))
            return bd.vortex_map(tgt, f, split, n, lo, hi)
        if kind == "smooth-circle":
            return bd.smooth_circle_map(self.m, n, bseed, lo, hi, int(b.get("modes", 3)), float(b.get("amplitude", 1.5)))
        if kind == "smooth-sphere":
            return bd.smooth_sphere_map(tgt, self.m, n, bseed, lo, hi, float(b.get("amplitude", 0.8)))
        if kind == "file":
            return bd.read_grid(b["path"], tgt)
        raise ValueError(f"unknown boundary generator {kind!r}")

    def pipeline_config(self) -> PipelineConfig:
        d, t = self.decomposition, self.thresholds
        return PipelineConfig(
            level_range=(int(d["k_min"]), int(d["k_max"])),
            delta_N=float(t.get("delta_N", 0.5)),
            delta_star=t.get("delta_star"),
            density=int(t.get("density", 3)),
            seed=subseed(self.seed, "spawn"),
            increments=d.get("increments"),
        )


# -------------------------------------------------------------------- report
@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    relation: str
    passed: bool

    def __post_init__(self):
        self.lhs, self.rhs, self.passed = float(self.lhs), float(self.rhs), bool(self.passed)

    @classmethod
    def le(cls, name, lhs, rhs) -> "Check":
        return cls(name, float(lhs), float(rhs), "<=", bool(lhs <= rhs))


@dataclass
class RunReport:
    scenario: dict
    status: str = "pass"
    checks: list = field(default_factory=list)
    gagliardo: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    trace: dict = field(default_factory=dict)
    energy: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    obstruction: dict | None = None
    tables: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def add(self, check: Check) -> None:
        self.checks.append(check)

    def finalize(self, expect: str | None) -> "RunReport":
        ok = all(c.passed for c in self.checks)
        if self.obstruction is not None:
            ok = ok and expect == NoFill.code
        elif expect is not None:
            ok = False
        self.status = "pass" if ok else "fail"
        return self

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        d.pop("tables")
        if not timing:
            d.pop("wall_clock")
        return d

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(_jsonable(self.to_dict(timing)), indent=2, sort_keys=True)

    def write(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_clock": self.wall_clock}) + "\n")
        (out / "checks.csv").write_text(_checks_csv(self.checks))
        for name, text in self.tables.items():
            (out / name).write_text(text)
        return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def _checks_csv(checks) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["name", "lhs", "relation", "rhs", "passed"])
    for c in checks:
        wr.writerow([c.name, repr(c.lhs), c.relation, repr(c.rhs), int(c.passed)])
    return buf.getvalue()


def _series_csv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# -------------------------------------------------------------------- oracle
class LiftingError(ValueError):
    pass


def lift_phase(angles: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Continuous lift of sampled angles on a 1-D or 2-D grid."""
    a = np.asarray(angles, dtype=float)
    if a.ndim == 1:
        return np.unwrap(a)
    if a.ndim != 2:
        raise LiftingError("phase lifting is implemented for 1-D and 2-D grids")
    first = np.unwrap(a[:, 0])
    rows = np.unwrap(np.column_stack([first, a[:, 1:]]), axis=1)
    # the other path order must agree, otherwise some loop winds
    top = np.unwrap(a[0, :])
    cols = np.unwrap(np.vstack([top, a[1:, :]]), axis=0)
    if np.max(np.abs(rows - cols)) > tol:
        raise LiftingError("lifting failure: sampled loops wind; the excision recipe does not apply")
    return rows


def boundary_degree(u: bd.BoundaryMap, center, radius: float, K: int = 512) -> int:
    t = 2 * np.pi * np.arange(K) / K
    pts = np.asarray(center) + radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    return loop_lift(u.sample(pts))[1]


@dataclass
class OracleResult:
    sampler: object
    energy: float
    method: str
    degree: int = 0
    per_cube: dict = field(default_factory=dict)


def oracle_lifting_extension(u: bd.BoundaryMap, p: float, D: DyadicDecomposition | None = None,
                             region=None, phi=None, n: int = 4) -> OracleResult:
    """U = (cos T, sin T) with T the convolution extension of a lifted phase."""
    if u.target.n != 1:
        raise ValueError("the lifting oracle needs a circle-valued map")
    phi = phi or mollifier(u.bdim)
    ang = np.arctan2(u.values[..., 1], u.values[..., 0])
    ss = u.singular_set
    deg, sigma = 0, None
    if getattr(u, "phase", None) is not None:
        theta, method = np.asarray(u.phase, float), "phase"
    elif ss is not None and not ss.empty and u.bdim == 2 and ss.dim == 0:
        sigma = np.asarray(ss.pieces[0][0], float)
        r0 = 0.5 * float(np.min(np.minimum(sigma - u.lo, u.hi - sigma)))
        deg = boundary_degree(u, sigma, r0)
        P = u.points()
        base = deg * np.arctan2(P[..., 1] - sigma[1], P[..., 0] - sigma[0])
        theta, method = lift_phase(_wrap(ang - base)), "excision"
    else:
        theta, method = lift_phase(ang), "unwrap"

    def Theta(X):
        X = np.atleast_2d(np.asarray(X, float))
        t = extend_samples(u, theta[..., None], phi, X)[:, 0]
        if sigma is not None and deg:
            t = t + deg * np.arctan2(X[:, 1] - sigma[1], X[:, 0] - sigma[0])
        return t

    def sampler(X):
        t = Theta(X)
        return np.stack([np.cos(t), np.sin(t)], axis=1)

    sampler.theta = Theta
    if D is None:
        D = DyadicDecomposition(u.m, -6, -1)
    if region is None:
        region = cubes_over_domain(D, u.domain)
    per = energy_by_cube(sampler, p, region, n=n, D=D)
    return OracleResult(sampler, float(sum(per[c] for c in sorted(per))), method, deg, per)


# ------------------------------------------------------------- fuzz suites
@dataclass
class FuzzSuite:
    instances: int = 1000
    dims: tuple = (2, 3)
    max_cubes: int = 200
    k_min: int = -6
    k_max: int = 1
    points: int = 0
    kinds: tuple = ("supercritical", "subcritical")
    p_offsets: tuple = (0.5, 1.0)

    @classmethod
    def from_dict(cls, d: dict) -> "FuzzSuite":
        known = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def random_decomposition(rng, m: int, k_min: int, k_max: int) -> DyadicDecomposition:
    inc = {k: tuple(float(rng.integers(-2, 3)) * 2.0 ** (k - 1) for _ in range(m - 1)) for k in range(k_min, k_max + 1)}
    return DyadicDecomposition(m, k_min, k_max, inc)


def supercritical_instance(seed: int, i: int, suite: FuzzSuite):
    rng = substream(seed, f"fuzz-super-{i}")
    m = suite.dims[i % len(suite.dims)]
    D = random_decomposition(rng, m, suite.k_min, suite.k_max)
    k0 = int(rng.integers(suite.k_min, suite.k_max + 1))
    nbad = int(rng.integers(1, suite.max_cubes + 1))
    bad = set()
    for _ in range(nbad):
        k = int(rng.integers(k0, suite.k_max + 1))
        span = max(1, int(2.0 ** -k))
        bad.add(CubeId(k, tuple(int(v) for v in rng.integers(-span, span, size=m - 1))))
    return rng, D, k0, bad


def subcritical_instance(seed: int, i: int, suite: FuzzSuite):
    rng = substream(seed, f"fuzz-sub-{i}")
    m = suite.dims[i % len(suite.dims)]
    ell = int(rng.integers(1, m))
    D0 = DyadicDecomposition(m, suite.k_min, suite.k_max)
    k0 = int(rng.integers(suite.k_min + 1, suite.k_max + 1))
    bounds = (-np.ones(m - 1), np.ones(m - 1))
    Sigma = None
    if m - ell - 2 >= 0 and rng.random() < 0.5:
        Sigma = bd.SingularSet(0, ((tuple(float(v) for v in rng.uniform(-0.5, 0.5, m - 1)), ()),), 1.0)
    spawn = spawn_over_singular_set(Sigma, 1.0, ell, D0, bounds, seed=int(rng.integers(0, 2 ** 31)))
    cs, rs = [], []
    for _ in range(int(rng.integers(1, 13))):
        k = int(rng.integers(k0, suite.k_max + 1))
        s = 2.0 ** k
        # balls stay above height 2^k0 so the hypothesis below k0 holds by construction
        cs.append(np.append(rng.uniform(-0.8, 0.8, m - 1), s * rng.uniform(1.3, 1.8)))
        rs.append(s * rng.uniform(0.05, 0.25))
    if Sigma is not None:
        b = np.array(Sigma.pieces[0][0])
        for _ in range(2):
            k = int(rng.integers(suite.k_min, k0))
            h = 2.0 ** k * rng.uniform(1.2, 1.8)
            cs.append(np.append(b + rng.uniform(-0.2, 0.2, m - 1) * h, h))
            rs.append(0.1 * h)
    bad = BadRegion(np.array(cs), np.array(rs))
    if Sigma is not None:
        psi_inf = spawn.psi
    else:
        def psi_inf(x, k0=k0):
            x = np.array(x, dtype=float)
            x[-1] = min(x[-1], 2.0 ** k0)
            return x
    return rng, spawn, bad, ell, k0, psi_inf


def _regular_probe(rng, D, is_sing, lo_h, hi_h, count):
    """Random points whose every containing cube is regular."""
    m = D.m
    out = []
    for _ in range(20 * count):
        if len(out) >= count:
            break
        x = np.append(rng.uniform(-1, 1, m - 1), rng.uniform(lo_h, hi_h))
        cs = D.cubes_containing(x)
        if cs and not any(is_sing(c) for c in cs):
            out.append(x)
    return np.array(out).reshape(-1, m)


def _super_result(seed, i, suite):
    rng, D, k0, bad = supercritical_instance(seed, i, suite)
    t0 = time.perf_counter()
    S = supercritical_propagate(D, bad, k0)
    m = D.m
    res = {"kind": "supercritical", "index": i, "m": m, "k0": k0, "bad": len(bad), "sing": len(S.sing)}
    bad_checks = [c for c in S.count_checks() if not c.ok]
    res["count_violations"] = len(bad_checks)
    res["count_witness"] = [[c.level, c.lhs, float(c.rhs)] for c in bad_checks[:3]]
    geo = []
    for off in suite.p_offsets:
        lhs, rhs = S.geometric_check(m + off)
        geo.append([m + off, lhs, rhs, bool(lhs <= rhs * (1 + 1e-12))])
    res["geometric"] = geo
    res["geometric_violations"] = sum(1 for g in geo if not g[3])
    res["count_seconds"] = time.perf_counter() - t0
    if suite.points:
        pts = sample_skeleton_points(D, sorted(S.sing), m, suite.points, rng)
        rep = validate_descending(S.psi, D, pts, tolerance=1e-9)
        reg = _regular_probe(rng, D, lambda c: c in S.sing, 2.0 ** k0, 2.0 ** (D.k_max + 1), max(1, suite.points // 10))
        ident = sum(1 for x in reg if not np.array_equal(S.psi(x), x))
        res.update(descending_ok=bool(rep.ok), descending_checked=rep.checked, descending_witness=rep.violation,
                   identity_checked=len(reg), identity_violations=ident)
    return res


def _sub_result(seed, i, suite):
    rng, spawn, bad, ell, k0, psi_inf = subcritical_instance(seed, i, suite)
    t0 = time.perf_counter()
    res = {"kind": "subcritical", "index": i, "m": spawn.decomposition.m, "ell": ell, "k0": k0,
           "spawned": len(spawn.cubes)}
    try:
        S = SubcriticalComplex(spawn.decomposition, spawn.cubes, bad, ell, k0, psi_inf)
    except ConstructionError as exc:
        res.update(skipped=str(exc), count_violations=0, face_violations=0)
        return res
    D, m = S.D, S.D.m
    fb = [c for c in S.face_checks() if not c.ok]
    cb = [c for c in S.count_checks() if not c.ok]
    res.update(bad=len(S.bad_cubes), sing=len(S.sing), face_violations=len(fb), count_violations=len(cb),
               face_witness=[[c.level, c.lhs, float(c.rhs)] for c in fb[:3]],
               count_witness=[[c.level, c.lhs, float(c.rhs)] for c in cb[:3]],
               count_seconds=time.perf_counter() - t0)
    if suite.points:
        cubes = sorted(c for c in S.sing if c.level >= k0) or [CubeId(k0, (0,) * (m - 1))]
        pts = sample_skeleton_points(D, cubes, ell, suite.points, rng)
        ims = np.array([S.psi(p) for p in pts])
        rep = validate_descending(None, D, pts, tolerance=1e-9, images=ims)
        in_bad = int(sum(bad.contains(q) for q in ims))
        # regular l-skeleton points: every containing cube regular
        reg_cubes = set()
        for c in cubes:
            for q in D.children(D.parent(c)) if c.level < D.k_max else [c]:
                if q not in S.sing and q.level >= k0:
                    reg_cubes.add(q)
        ident, nreg = 0, 0
        if reg_cubes:
            cand = sample_skeleton_points(D, sorted(reg_cubes), ell, max(1, suite.points // 10), rng)
            for x in cand:
                cs = D.cubes_containing(x)
                if cs and not any(c in S.sing for c in cs):
                    nreg += 1
                    ident += not np.array_equal(S.psi(x), x)
        res.update(descending_ok=bool(rep.ok), descending_checked=rep.checked, descending_witness=rep.violation,
                   images_in_bad=in_bad, identity_checked=nreg, identity_violations=ident)
        if spawn.Sigma is not None and spawn.cubes:
            sp = sample_skeleton_points(spawn.decomposition, sorted(spawn.cubes), m, suite.points, rng)
            srep = validate_descending(spawn.psi, spawn.decomposition, sp, tolerance=1e-9)
            res.update(spawn_descending_ok=bool(srep.ok), spawn_checked=srep.checked, spawn_witness=srep.violation)
    return res


@dataclass
class CountsReport:
    seed: int
    suite: dict
    results: list
    seconds: dict

    def totals(self) -> dict:
        t = {"instances": len(self.results)}
        for key in ("count_violations", "face_violations", "geometric_violations", "identity_violations", "images_in_bad"):
            t[key] = sum(r.get(key, 0) for r in self.results)
        t["descending_failures"] = sum(1 for r in self.results if r.get("descending_ok") is False)
        t["spawn_descending_failures"] = sum(1 for r in self.results if r.get("spawn_descending_ok") is False)
        t["descending_points"] = sum(r.get("descending_checked", 0) + r.get("spawn_checked", 0) for r in self.results)
        t["skipped"] = sum(1 for r in self.results if "skipped" in r)
        return t

    @property
    def passed(self) -> bool:
        t = self.totals()
        return all(t[k] == 0 for k in ("count_violations", "face_violations", "geometric_violations",
                                       "identity_violations", "descending_failures", "spawn_descending_failures"))

    def to_dict(self, timing: bool = False) -> dict:
        rows = [{k: v for k, v in r.items() if timing or not k.endswith("seconds")} for r in self.results]
        d = {"seed": self.seed, "suite": self.suite, "totals": self.totals(), "passed": self.passed, "results": rows}
        if timing:
            d["seconds"] = self.seconds
        return d


def _run_one(args):
    kind, seed, i, suite = args
    return _super_result(seed, i, suite) if kind == "supercritical" else _sub_result(seed, i, suite)


def verify_counts(suite: FuzzSuite | dict | None = None, seed: int = 0) -> CountsReport:
    """Run the exact counting and descending suites over generated instances."""
    if suite is None:
        suite = FuzzSuite()
    elif isinstance(suite, dict):
        suite = FuzzSuite.from_dict(suite)
    seconds = {}
    results = []
    workers = int(os.environ.get("CUBEXT_THREADS", "1"))
    for kind in suite.kinds:
        t0 = time.perf_counter()
        jobs = [(kind, seed, i, suite) for i in range(suite.instances)]
        if workers > 1 and jobs:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(workers) as ex:
                results.extend(ex.map(_run_one, jobs, chunksize=16))
        else:
            results.extend(_run_one(j) for j in jobs)
        seconds[kind] = time.perf_counter() - t0
    return CountsReport(seed, asdict(suite), results, seconds)


# ------------------------------------------------------------- soundness
def denser_axis_count(n: int, m: int, factor: float) -> int:
    """Smallest per-axis count whose n'^m samples are at least ``factor`` times n^m."""
    k = n
    while k ** m < factor * n ** m:
        k += 1
    return k


def good_cube_soundness(cl, u: bd.BoundaryMap, phi, factor: int = 4) -> dict:
    """Evaluate the projected extension on GOOD cubes at a denser sample grid."""
    D = cl.decomposition
    n = denser_axis_count(cl.density, D.m, factor)
    good = sorted(cl.good)
    errors, evaluated, worst = 0, 0, 0.0
    per = n ** D.m
    batch = max(1, 200_000 // per)
    for a in range(0, len(good), batch):
        group = good[a:a + batch]
        P = np.concatenate([cube_samples(D, c, n) for c in group])
        V = extension_eval(u, phi, P)
        evaluated += len(group)
        worst = max(worst, float(np.max(u.target.dist_to(V))) if len(V) else 0.0)
        for c, Vc in zip(group, np.split(V, len(group))):
            try:
                u.target.project(Vc)
            except ProjectionOutOfRange:
                errors += 1
    return {"density": n, "good_cubes": evaluated, "errors": errors, "max_distance": worst,
            "collar": u.target.delta}


# ------------------------------------------------------------- run scenario
def _counts_table(levels, *cols) -> str:
    names = [c[0] for c in cols]
    rows = [[k] + [c[1].get(k, 0) for c in cols] for k in levels]
    return _series_csv(["level"] + names, rows)


def run_scenario(s: Scenario, out=None) -> RunReport:
    """Run a scenario end to end; the report is deterministic apart from wall_clock."""
    t0 = time.perf_counter()
    rep = RunReport(scenario=s.to_dict())
    try:
        if s.pipeline == "counts-only":
            _run_counts(s, rep)
        else:
            _run_pipeline(s, rep)
    except NoFill as exc:
        rep.obstruction = exc.report
    rep.finalize(s.expect)
    rep.wall_clock = time.perf_counter() - t0
    if out is not None:
        rep.write(out)
    return rep


def _run_counts(s: Scenario, rep: RunReport) -> None:
    cr = verify_counts(FuzzSuite.from_dict(s.fuzz), s.seed)
    t = cr.totals()
    rep.counts = t
    for key in ("count_violations", "face_violations", "geometric_violations", "identity_violations",
                "descending_failures", "spawn_descending_failures"):
        rep.add(Check(key, t[key], 0, "==", t[key] == 0))
    rep.tables["counts.json"] = json.dumps(_jsonable(cr.to_dict()), indent=1, sort_keys=True) + "\n"


def _run_pipeline(s: Scenario, rep: RunReport) -> None:
    u = s.make_boundary()
    p, m = float(s.p), u.m
    phi = mollifier(u.bdim)
    cfg = s.pipeline_config()
    delta_star = cfg.delta_star if cfg.delta_star is not None else cfg.delta_N / 4
    g = bd.gagliardo_seminorm(u, p, delta=delta_star)
    rep.gagliardo = {"value": g.value, "truncated_value": g.truncated_value,
                     "truncated_value_p": g.truncated_value_p, "delta": delta_star, "grid": list(g.grid)}
    D0 = DyadicDecomposition(m, *cfg.level_range, cfg.increments)
    cl = classify(D0, u, phi, cfg.delta_N, cfg.density, cubes_over_domain(D0, u.domain), cfg.delta_star)
    bs = bad_size(cl, p)
    rep.counts["bad"] = cl.counts()
    rep.weighted["bad"] = bs["weighted"]
    rep.weighted["bad_integral"] = bs["integral"]
    if g.truncated_value > 0:
        rep.constants["bad_over_truncated_gagliardo"] = bs["weighted"] / g.truncated_value
    rep.tables["classification.csv"] = cl.to_csv()
    snd = good_cube_soundness(cl, u, phi, 4)
    rep.constants["soundness"] = snd
    rep.add(Check("projection_errors_on_good_cubes", snd["errors"], 0, "==", snd["errors"] == 0))
    if s.thresholds.get("calibrate_c_mo"):
        rng = substream(s.seed, "c_mo")
        pts = np.column_stack([rng.uniform(-0.5, 0.5, (32, m - 1)), 2.0 ** rng.uniform(-5, -2, 32)])
        rep.constants["C_MO"] = calibrate_c_mo(u, phi, pts, delta_star)
    if s.pipeline == "classify-only":
        return
    if s.pipeline == "supercritical":
        U = assemble_supercritical(u, p, cfg)
        S = U.meta["complex"]
        for c in S.count_checks():
            rep.add(Check(f"sing_count_le_bad_prefix[k={c.level}]", c.lhs, float(c.rhs), "<=", c.ok))
        lhs, rhs = S.geometric_check(p)
        rep.add(Check.le("geometric_closure", lhs, rhs))
    else:
        U = assemble_subcritical(u, p, cfg)
        S = U.meta["complex"]
        for c in S.face_checks():
            rep.add(Check(f"prop_faces_averaged_shift[k={c.level}]", c.lhs, float(c.rhs), "<=", c.ok))
        for c in S.count_checks():
            rep.add(Check(f"sing_count_bound[k={c.level}]", c.lhs, float(c.rhs), "<=", c.ok))
        rep.tables["shifts.csv"] = S.shifts_csv()
        rep.constants["kappa"] = U.meta["kappa"]
        rep.constants["M"] = U.meta["M"]
    rep.constants["k0"] = U.meta["k0"]
    rep.counts["singular"] = U.counts()
    rep.weighted["singular"] = U.weighted_size(p)
    rep.tables["singular.csv"] = S.to_csv()
    rep.tables["counts.csv"] = _counts_table(U.D.levels(), ("bad", rep.counts["bad"]), ("singular", rep.counts["singular"]))
    nq = int(s.quadrature.get("n", 4))
    per = energy_by_cube(U, p, n=nq)
    E = float(sum(per[c] for c in sorted(per)))
    E_reg = float(sum(per[c] for c in sorted(per) if c in U.regular))
    rep.energy = {"total": E, "regular": E_reg, "singular": E - E_reg,
                  "over_gagliardo": E / g.value if g.value > 0 else None}
    if rep.weighted["singular"] > 0:
        rep.constants["energy_bound_C"] = (E - E_reg) / rep.weighted["singular"]
    rep.add(Check("energy_finite", E, math.inf, "<", math.isfinite(E)))
    if s.trace:
        eps = [2.0 ** -j for j in s.trace.get("exponents", [2, 3, 4, 5, 6])]
        td = trace_defect(U, u, eps, p, phi)
        rep.trace = td.to_dict()
        rep.tables["trace.csv"] = _series_csv(
            ["eps", "measure", "measure_over_eps", "lp_distance"],
            zip(td.eps, td.measure, td.ratio, td.lp_distance))
        if "min_halving" in s.trace:
            for a, f in enumerate(td.halving_factors):
                if td.ratio[a] > 0:
                    rep.add(Check(f"trace_halving[{a}]", float(s.trace["min_halving"]), f, "<=",
                                  f >= s.trace["min_halving"]))
    if s.oracle and u.target.n == 1:
        orc = oracle_lifting_extension(u, p, U.D, U.region, phi, nq)
        ratio = E / orc.energy if orc.energy > 0 else None
        rep.oracle = {"energy": orc.energy, "method": orc.method, "degree": orc.degree, "ratio": ratio}
        if ratio is not None:
            rep.add(Check.le("oracle_ratio_upper", ratio, 10.0))
            rep.add(Check.le("oracle_ratio_lower", 0.1, ratio))


def scenario_dir() -> Path:
    """Shipped scenario files (repository checkout)."""
    return Path(__file__).resolve().parents[2] / "scenarios"


def shipped_scenarios() -> list[Path]:
    return sorted(scenario_dir().glob("*.json"))
