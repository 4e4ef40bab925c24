"""``ledger-sim`` command line: run scenarios, audit exports, sweep costs.

Exit codes: 0 ok, 1 usage or parse error, 2 invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path

from .costmodel import DEFAULT_SERVERFUL, calibrate_serverless, generate_cost_curve, parse_grid
from .integrity import audit_bytes
from .simulation import ScenarioError, load_scenario, run_scenario, write_artifacts

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2


def _scenario(args):
    scn = load_scenario(args.scenario)
    if args.seed is not None:
        scn = replace(scn, seed=args.seed)
    return scn


def cmd_run(args) -> int:
    scn = _scenario(args)
    result = run_scenario(scn)
    out = write_artifacts(result, args.out or scn.out)
    sys.stdout.write(result.report.to_json())
    for v in result.report.violations:
        print(f"violation: {v}", file=sys.stderr)
    print(f"artifacts written to {out}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_VIOLATION


def cmd_audit(args) -> int:
    try:
        data = Path(args.ledger).read_bytes()
    except OSError as err:
        print(f"error: {args.ledger}: {err.strerror}", file=sys.stderr)
        return EXIT_USAGE
    if not data:
        print(f"error: {args.ledger}: empty ledger file", file=sys.stderr)
        return EXIT_USAGE
    report = audit_bytes(data)
    sys.stdout.write(report.text())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "audit.txt").write_text(report.text())
    return EXIT_OK if report.ok else EXIT_VIOLATION


def cmd_costsweep(args) -> int:
    scn = _scenario(args)
    grid = parse_grid(args.grid)
    params = calibrate_serverless(max_block_size=scn.chain.max_block_size)
    bound_ms = scn.workload.latency_bound_ms or scn.chain.default_latency_bound_ms
    curve = generate_cost_curve(params, DEFAULT_SERVERFUL, grid, bound_ms / 1000)
    out = Path(args.out or scn.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cost_curve.csv").write_text(curve.csv())

    # measured billing at three grid points, short constant-rate runs
    picks = sorted({grid[0], grid[len(grid) // 2], grid[-1]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["throughput_tps", "mean_batch_size", "measured_usd_per_tx", "analytic_usd_per_tx", "rel_error"])
    violations = 0
    for tps in picks:
        duration = min(scn.workload.duration, max(2000 / tps, 5 * bound_ms / 1000))
        wl = replace(scn.workload, shape="constant", rate=tps, duration=duration)
        rep = run_scenario(replace(scn, workload=wl, faults=replace(scn.faults, nefarious_orchestrator=False)),
                           trace=False).report
        violations += bool(rep.violations)
        analytic = params.per_tx + params.per_block / rep.mean_batch_size if rep.mean_batch_size else float("nan")
        err = abs(rep.billing_per_tx_usd - analytic) / analytic
        w.writerow([f"{tps:g}", rep.mean_batch_size, repr(rep.billing_per_tx_usd), repr(analytic), f"{err:.4f}"])
    (out / "cost_crosscheck.csv").write_text(buf.getvalue())
    sys.stdout.write(curve.csv())
    for name, t in curve.crossovers.items():
        print(f"crossover {name}: {'none in grid' if t is None else f'{t:g} tx/s'}", file=sys.stderr)
    sys.stderr.write(buf.getvalue())
    return EXIT_VIOLATION if violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--out", default=None, help="output directory")
    p = argparse.ArgumentParser(prog="ledger-sim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="simulate a scenario and write artifacts")
    r.add_argument("scenario")
    r.set_defaults(fn=cmd_run)
    a = sub.add_parser("audit", parents=[common], help="verify an exported ledger offline")
    a.add_argument("ledger")
    a.set_defaults(fn=cmd_audit)
    c = sub.add_parser("costsweep", parents=[common], help="serverless vs serverful cost table")
    c.add_argument("scenario")
    c.add_argument("--grid", required=True, help="a:b:step or comma list of tx/s")
    c.set_defaults(fn=cmd_costsweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.fn(args)
    except (ScenarioError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
