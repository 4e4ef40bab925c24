"""Tabulate serverless vs serverful per-transaction cost and print the crossovers.

    python scripts/cost_sweep.py --grid 1:20001:100 --bound-ms 100 --out out/cost
"""
import argparse
from pathlib import Path

from serverless_ledger.costmodel import DEFAULT_SERVERFUL, calibrate_serverless, generate_cost_curve, parse_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="1:20001:100")
    ap.add_argument("--bound-ms", type=float, default=100.0)
    ap.add_argument("--out", default="out/cost")
    args = ap.parse_args()

    params = calibrate_serverless()
    curve = generate_cost_curve(params, DEFAULT_SERVERFUL, parse_grid(args.grid), args.bound_ms / 1000)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cost_curve.csv").write_text(curve.csv())

    print(f"serverless: a={params.per_tx:.6e} USD/tx, b={params.per_block:.6e} USD/block")
    for name, tps in curve.crossovers.items():
        print(f"{name:>16}: cheaper than serverless from {tps:g} tx/s" if tps is not None
              else f"{name:>16}: never cheaper in this grid")
    risky = [(row[0], name) for row, flags in zip(curve.rows, curve.crash_risk)
             for name, flag in zip(curve.configs, flags) if flag]
    if risky:
        first = {}
        for tps, name in risky:
            first.setdefault(name, tps)
        for name, tps in first.items():
            print(f"{name:>16}: at or above rated capacity from {tps:g} tx/s")
    print(f"wrote {out / 'cost_curve.csv'}")


if __name__ == "__main__":
    main()
