import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cubext.boundary_data import constant_map, smooth_circle_map
from cubext.cli import main
from cubext.dyadic_geometry import DyadicDecomposition
from cubext.harness import (
    Check,
    FuzzSuite,
    LiftingError,
    Scenario,
    denser_axis_count,
    lift_phase,
    oracle_lifting_extension,
    run_scenario,
    scenario_dir,
    shipped_scenarios,
    subseed,
    verify_counts,
)
from cubext.targets import circle

SMALL_SUB = {
    "name": "small_sub",
    "m": 2,
    "p": 1.5,
    "target": {"name": "circle", "delta": 0.75},
    "boundary": {"kind": "vortex", "map": "two_point", "split": [1, 0]},
    "domain": {"lo": -1.0, "hi": 1.0, "n": 64},
    "decomposition": {"k_min": -5, "k_max": -1},
    "thresholds": {"delta_N": 0.5, "delta_star": None, "density": 3},
    "pipeline": "subcritical",
    "seed": 4,
    "trace": {"exponents": [2, 3, 4]},
    "oracle": True,
}


def test_subseed_is_stable_and_label_dependent():
    assert subseed(7, "boundary") == subseed(7, "boundary")
    assert subseed(7, "boundary") != subseed(7, "spawn")
    assert subseed(7, "boundary") != subseed(8, "boundary")


def test_scenario_round_trip_and_resolution():
    s = Scenario.from_dict(SMALL_SUB)
    assert Scenario.from_dict(s.to_dict()) == s
    assert s.with_resolution(1.5).domain["n"] == 96
    assert s.with_resolution(0.3).domain["n"] % 2 == 0
    with pytest.raises(ValueError):
        Scenario.from_dict({**SMALL_SUB, "pipeline": "nope"})


def test_shipped_scenarios_load():
    paths = shipped_scenarios()
    assert paths and all(p.parent == scenario_dir() for p in paths)
    for p in paths:
        Scenario.load(p)


def test_check_relation():
    assert Check.le("a", 1.0, 2.0).passed
    assert not Check.le("a", 3.0, 2.0).passed


def test_report_is_deterministic(tmp_path):
    s = Scenario.from_dict(SMALL_SUB)
    run_scenario(s, tmp_path / "a")
    run_scenario(s, tmp_path / "b")
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    assert "wall" not in a.decode()
    assert json.loads(a)["status"] == "pass"


def test_cli_classify_and_report(tmp_path, capsys):
    path = scenario_dir() / "constant_classify.json"
    assert main(["classify", "--scenario", str(path), "--out", str(tmp_path)]) == 0
    assert main(["report", "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_extend_sub_with_overrides(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(SMALL_SUB))
    assert main(["extend-sub", "--scenario", str(p), "--seed", "9", "--resolution-scale", "2"]) == 0


def test_cli_module_entry_point(tmp_path):
    path = scenario_dir() / "constant_classify.json"
    out = subprocess.run([sys.executable, "-m", "cubext", "classify", "--scenario", str(path)],
                         capture_output=True, text=True, timeout=300)
    assert out.returncode == 0
    assert "constant_classify: PASS" in out.stdout


def test_empty_and_single_cube_suites():
    assert verify_counts(FuzzSuite(instances=0), seed=0).passed
    rep = verify_counts(FuzzSuite(instances=5, max_cubes=1, kinds=("supercritical",)), seed=3)
    assert rep.passed
    for r in rep.results:
        assert r["count_violations"] == 0


def test_counts_report_ignores_worker_count(monkeypatch):
    suite = FuzzSuite(instances=6, points=10)
    a = verify_counts(suite, seed=5).to_dict()
    monkeypatch.setenv("CUBEXT_THREADS", "2")
    b = verify_counts(suite, seed=5).to_dict()
    assert a == b


def test_oracle_on_constant_data():
    u = constant_map(circle(), 2, 64)
    res = oracle_lifting_extension(u, 1.5, DyadicDecomposition(2, -4, -1))
    assert res.energy == 0.0 and res.method == "unwrap"


def test_oracle_uses_known_phase():
    u = smooth_circle_map(2, 64, seed=1)
    res = oracle_lifting_extension(u, 1.5, DyadicDecomposition(2, -4, -1))
    assert res.method == "phase" and res.energy > 0


def test_lift_phase_rejects_winding():
    t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    x, y = np.meshgrid(t, t, indexing="ij")
    ang = np.arctan2(np.sin(x + y), np.cos(x + y))
    assert np.allclose(np.cos(lift_phase(ang)), np.cos(ang))
    swirl = np.arctan2(*np.meshgrid(np.linspace(-1, 1, 32), np.linspace(-1, 1, 32), indexing="ij"))
    with pytest.raises(LiftingError):
        lift_phase(swirl)


@given(st.integers(3, 9), st.integers(2, 4), st.integers(2, 8))
def test_denser_axis_count(n, m, factor):
    k = denser_axis_count(n, m, factor)
    assert k ** m >= factor * n ** m
    assert (k - 1) ** m < factor * n ** m
