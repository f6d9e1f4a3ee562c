"""Command line: ``lngate-sim run|solve-game|check|scale``.

Exit codes: 0 clean, 1 bad input (scenario or parameter file), 2 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from .game import (
    GameParameters,
    InvalidParameters,
    backward_induction,
    build_closure_game,
    build_collusion_game,
    to_dot,
    to_text,
)
from .sim.builtin import BUILTIN
from .sim.profiles import PROFILES
from .sim.runner import run_scalability, run_scenario
from .sim.scenario import ScenarioError, load_scenario, parse_scenario

EXIT_OK, EXIT_INPUT, EXIT_VIOLATION = 0, 1, 2


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def cmd_run(args) -> int:
    try:
        sc = load_scenario(args.file)
    except ScenarioError as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    result = run_scenario(sc, profile=args.profile, seed=args.seed)
    report = result.report()
    if args.out:
        _write(args.out, result.trace_json())
    if args.trace_text:
        _write(args.trace_text, result.trace_text())
    if args.report:
        _write(args.report, json.dumps(report, sort_keys=True, indent=1))
    for f in report["flows"]:
        print(f"flow {f['flow']:>2} {f['kind']:<9} {f['status']:<8} {f['duration_ms']:>10.3f} ms  "
              f"tkeygen={f['tkeygen']} tsign={f['tsign']} derive={f['derive_child']}  "
              f"iot_bytes={f['iot_bytes']}")
    for v in result.violations:
        print(f"VIOLATION {v}")
    return EXIT_VIOLATION if result.violations else EXIT_OK


def cmd_solve(args) -> int:
    try:
        with open(args.params, encoding="utf-8") as fh:
            g = GameParameters.from_mapping(json.load(fh))
        root = build_collusion_game(g) if args.game == "collusion" else build_closure_game(g)
    except (OSError, ValueError, KeyError) as exc:
        detail = "; ".join(exc.violations) if isinstance(exc, InvalidParameters) else str(exc)
        print(f"{args.params}: {detail}", file=sys.stderr)
        return EXIT_INPUT
    sol = backward_induction(root)
    print(to_dot(root, sol) if args.format == "dot" else to_text(root, sol))
    return EXIT_OK


def cmd_check(args) -> int:
    failed = 0
    for name, (text, statuses) in sorted(BUILTIN.items()):
        result = run_scenario(parse_scenario(text), profile=args.profile)
        got = [r.status for r in result.records]
        problems = list(result.violations)
        if got != statuses:
            problems.append(f"flow statuses {got}, expected {statuses}")
        print(f"{'PASS' if not problems else 'FAIL'} {name}")
        for p in problems:
            print(f"    {p}")
        failed += bool(problems)
    return EXIT_VIOLATION if failed else EXIT_OK


def cmd_scale(args) -> int:
    rows = []
    for n in range(1, args.max_devices + 1):
        r = run_scalability(n, args.payments, profile=args.profile, seed=args.seed)
        rows.append(r)
        print(f"devices={n} payments={r['completed']} mean_delay_ms={r['mean_delay_ms']:.3f}")
    means = [r["mean_delay_ms"] for r in rows]
    if any(b < a for a, b in zip(means, means[1:])):
        print("VIOLATION mean delay decreases with device count")
        return EXIT_VIOLATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lngate-sim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario file")
    run.add_argument("file")
    run.add_argument("--profile", choices=sorted(PROFILES))
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="write the JSON trace here")
    run.add_argument("--report", help="write the JSON report here")
    run.add_argument("--trace-text", help="write the line-oriented trace here")
    run.set_defaults(func=cmd_run)

    solve = sub.add_parser("solve-game", help="solve the closure or collusion game")
    solve.add_argument("--params", required=True, help="JSON object of game parameters")
    solve.add_argument("--game", choices=("closure", "collusion"), default="closure")
    solve.add_argument("--format", choices=("text", "dot"), default="text")
    solve.set_defaults(func=cmd_solve)

    check = sub.add_parser("check", help="run the built-in invariant scenarios")
    check.add_argument("--profile", choices=sorted(PROFILES), default="none")
    check.set_defaults(func=cmd_check)

    scale = sub.add_parser("scale", help="concurrent devices sharing one gateway and bridge host")
    scale.add_argument("--max-devices", type=int, default=5)
    scale.add_argument("--payments", type=int, default=3)
    scale.add_argument("--profile", choices=sorted(PROFILES), default="wifi")
    scale.add_argument("--seed", type=int, default=0)
    scale.set_defaults(func=cmd_scale)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
