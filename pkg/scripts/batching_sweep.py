"""Measured batch size and billing against the analytic model over arrival rates.

    python scripts/batching_sweep.py --rates 20,100,500,2000 --bound-ms 100
"""
import argparse

from serverless_ledger.costmodel import calibrate_serverless, per_tx_cost_serverless
from serverless_ledger.simulation import analytic_batch, constant_rate, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", default="20,100,500,2000")
    ap.add_argument("--bound-ms", type=int, default=100)
    ap.add_argument("--nodes", type=int, default=4)
    ap.add_argument("--txs", type=int, default=2000, help="approximate transactions per run")
    args = ap.parse_args()

    params = calibrate_serverless()
    print(f"{'rate':>7} {'expect_n':>8} {'meas_n':>8} {'n_err':>7} {'usd/tx':>12} {'model':>12} {'c_err':>7} {'p95ms':>7}")
    for rate in (float(x) for x in args.rates.split(",")):
        duration = max(args.txs / rate, 5 * args.bound_ms / 1000)
        scn = constant_rate(rate, duration, nodes=args.nodes, latency_bound_ms=args.bound_ms)
        r = run_scenario(scn, trace=False).report
        expect = analytic_batch(scn)
        model = per_tx_cost_serverless(params, r.mean_batch_size)
        print(f"{rate:>7g} {expect:>8g} {r.mean_batch_size:>8.1f} {(r.mean_batch_size - expect) / expect:>+7.1%} "
              f"{r.billing_per_tx_usd:>12.4e} {model:>12.4e} {(r.billing_per_tx_usd - model) / model:>+7.1%} "
              f"{r.latency_ms['p95']:>7}")


if __name__ == "__main__":
    main()
