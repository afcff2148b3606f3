"""Command-line entry point."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import FuzzSuite, Scenario, _jsonable, run_scenario, verify_counts

COMMANDS = {
    "classify": "classify-only",
    "extend-super": "supercritical",
    "extend-sub": "subcritical",
}


def _load(args) -> Scenario:
    if not args.scenario:
        raise SystemExit("--scenario is required for this command")
    s = Scenario.load(args.scenario)
    if args.seed is not None:
        s = s.with_seed(args.seed)
    if args.resolution_scale != 1.0:
        s = s.with_resolution(args.resolution_scale)
    return s


def _force(s: Scenario, **kw) -> Scenario:
    d = s.to_dict()
    d.update(kw)
    return Scenario.from_dict(d)


def _summary(rep) -> str:
    lines = [f"{rep.scenario['name']}: {rep.status.upper()}"]
    if rep.obstruction:
        lines.append(f"  obstruction: {json.dumps(rep.obstruction, sort_keys=True)}")
    failed = [c for c in rep.checks if not c.passed]
    lines.append(f"  checks: {len(rep.checks) - len(failed)}/{len(rep.checks)} passed")
    for c in failed[:10]:
        lines.append(f"  FAILED {c.name}: {c.lhs!r} {c.relation} {c.rhs!r}")
    if rep.energy:
        lines.append(f"  energy: {rep.energy['total']:.6g} (regular {rep.energy['regular']:.6g})")
    if rep.oracle:
        lines.append(f"  oracle: {rep.oracle['energy']:.6g} ratio {rep.oracle['ratio']}")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cubext", description="Dyadic trace-extension experiments.")
    ap.add_argument("command", choices=["classify", "extend-super", "extend-sub", "verify-counts",
                                        "oracle-compare", "report"])
    ap.add_argument("--scenario", help="scenario JSON file")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", help="output directory for reports")
    ap.add_argument("--resolution-scale", type=float, default=1.0)
    args = ap.parse_args(argv)

    if args.command == "report":
        if not args.out:
            raise SystemExit("report needs --out pointing at a run directory")
        path = Path(args.out) / "report.json"
        d = json.loads(path.read_text())
        print(f"{d['scenario']['name']}: {d['status'].upper()}")
        for c in d["checks"]:
            print(f"  {'ok ' if c['passed'] else 'BAD'} {c['name']}: {c['lhs']} {c['relation']} {c['rhs']}")
        return 0 if d["status"] == "pass" else 1

    if args.command == "verify-counts":
        suite = FuzzSuite()
        seed = 0
        if args.scenario:
            s = Scenario.load(args.scenario)
            suite, seed = FuzzSuite.from_dict(s.fuzz), s.seed
        if args.seed is not None:
            seed = args.seed
        cr = verify_counts(suite, seed)
        text = json.dumps(_jsonable(cr.to_dict()), indent=1, sort_keys=True)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "counts.json").write_text(text + "\n")
        print(json.dumps(cr.totals(), sort_keys=True))
        return 0 if cr.passed else 1

    s = _load(args)
    if args.command in COMMANDS:
        s = _force(s, pipeline=COMMANDS[args.command])
    elif args.command == "oracle-compare":
        pipe = s.pipeline if s.pipeline in ("subcritical", "supercritical") else "subcritical"
        s = _force(s, pipeline=pipe, oracle=True)
    rep = run_scenario(s, args.out)
    print(_summary(rep))
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
