"""Run a grid of fault configurations and summarise outcomes, one row per run.

    python scripts/fault_matrix.py --seeds 3
"""
import argparse
import itertools

from serverless_ledger.quorum import VotePolicy
from serverless_ledger.simulation import ChainSettings, Scenario, Workload, run_scenario
from serverless_ledger.substrate import US_PER_S, FaultPlan

POLICIES = ("majority", "bft_majority", "all")


def crash_plan(count):
    # stagger crashes over the first second, each lasting one second
    return tuple((f"n{i + 1}", int(0.2 * i * US_PER_S), int((0.2 * i + 1.0) * US_PER_S)) for i in range(count))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=7)
    ap.add_argument("--rate", type=float, default=80)
    ap.add_argument("--duration", type=float, default=3)
    ap.add_argument("--seeds", type=int, default=2)
    args = ap.parse_args()

    header = f"{'policy':>12} {'crash':>5} {'loss':>5} {'evil':>5} {'seed':>4} | {'commit':>6} {'abort':>5} {'rej':>4} " \
             f"{'p95ms':>7} {'n_bar':>6} {'resync':>6} {'forged':>6} ok"
    print(header)
    print("-" * len(header))
    bad = 0
    for policy, loss, evil in itertools.product(POLICIES, (0.0, 0.02), (False, True)):
        tolerated = VotePolicy(policy, args.nodes).tolerated_faults
        for crashes, seed in itertools.product(sorted({0, tolerated}), range(args.seeds)):
            scn = Scenario(
                name=f"{policy}-c{crashes}", seed=seed,
                chain=ChainSettings(nodes=args.nodes, policy=policy),
                workload=Workload(shape="poisson", rate=args.rate, duration=args.duration, conflict=0.2),
                faults=FaultPlan(node_crashes=crash_plan(crashes), message_loss_rate=loss,
                                 nefarious_orchestrator=evil),
            )
            r = run_scenario(scn, trace=False).report
            bad += bool(r.violations)
            print(f"{policy:>12} {crashes:>5} {loss:>5} {str(evil):>5} {seed:>4} | {r.committed:>6} "
                  f"{r.aborted:>5} {r.rejected:>4} {r.latency_ms['p95']:>7} {r.mean_batch_size:>6.1f} {r.resyncs:>6} "
                  f"{r.forged_commits:>6} {'yes' if not r.violations else 'NO ' + '; '.join(r.violations)}")
    print(f"\n{bad} runs with violations")
    raise SystemExit(1 if bad else 0)


if __name__ == "__main__":
    main()
