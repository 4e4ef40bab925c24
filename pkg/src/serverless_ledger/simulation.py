"""Scenario files, workload generation and end-to-end simulated runs."""
from __future__ import annotations

import csv
import io
import json
import math
import random
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli

from .costmodel import calibrate_serverless, calibrate_unit_prices
from .integrity import audit_state_at, chain_verify, export_ledger
from .ledger_model import Keyring, LedgerEntry, Transaction, sign_body
from .network import ChainNetwork, make_chain_config, provision_network
from .schema import CompiledChainSpec, SchemaError, compile_schema, encode_value
from .state import data_key, state_digest
from .substrate import US_PER_MS, US_PER_S, EventTrace, FaultPlan, LatencyRange, UnitPrices, derive_seed

WORKLOAD_SHAPES = ("constant", "poisson", "burst")


class ScenarioError(ValueError):
    """Scenario could not be loaded; message carries file and, when known, line."""


@dataclass
class ChainSettings:
    nodes: int = 8
    policy: str = "majority"
    max_block_size: int = 900
    leader_mode: str = "rotating"
    dedicated_leader: str = ""
    default_latency_bound_ms: int = 100
    chain_id: str = "sim"


@dataclass
class Workload:
    shape: str = "constant"
    rate: float = 100.0
    duration: float = 10.0
    fields: int = 1
    clients: int = 4
    table: str = "kv"
    conflict: float = 0.0
    hot_rows: int = 8
    latency_bound_ms: int | None = None

    def __post_init__(self):
        if self.shape not in WORKLOAD_SHAPES:
            raise ValueError(f"workload shape must be one of {WORKLOAD_SHAPES}")
        if self.rate <= 0 or self.duration <= 0:
            raise ValueError("workload rate and duration must be positive")
        if self.fields < 1 or self.clients < 1 or self.hot_rows < 1:
            raise ValueError("fields, clients and hot_rows must be >= 1")
        if not 0.0 <= self.conflict <= 1.0:
            raise ValueError("conflict must be in [0, 1]")


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    schema: dict | None = None
    chain: ChainSettings = field(default_factory=ChainSettings)
    workload: Workload = field(default_factory=Workload)
    faults: FaultPlan = field(default_factory=FaultPlan)
    latency: LatencyRange = field(default_factory=LatencyRange)
    prices: UnitPrices | None = None  # None: calibrated to the cost anchors for this deployment
    forge_probability: float = 0.5
    out: str = "out"

    def node_ids(self) -> list[str]:
        return [f"n{i}" for i in range(self.chain.nodes)]

    def client_ids(self) -> list[str]:
        return [f"c{i}" for i in range(self.workload.clients)]

    def unit_prices(self) -> UnitPrices:
        if self.prices is not None:
            return self.prices
        return calibrate_unit_prices(calibrate_serverless(), self.chain.nodes, self.workload.fields)

    def schema_doc(self) -> dict:
        return self.schema if self.schema is not None else default_schema(self.workload)


def default_schema(w: Workload) -> dict:
    return {
        "tables": [{"name": w.table, "fields": [{"name": f"f{i}", "type": "integer"} for i in range(w.fields)]}],
        "default_acl": {f"{w.table}.*": {"read": ["*"], "write": ["*"]}},
    }


def _build(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ScenarioError(f"{where}: {err}") from None


def scenario_from_dict(data: dict, base_dir: Path | None = None, source: str = "<scenario>") -> Scenario:
    data = dict(data)
    kw: dict[str, Any] = {}
    for key in ("name", "seed", "forge_probability", "out"):
        if key in data:
            kw[key] = data.pop(key)
    schema = data.pop("schema", None)
    if isinstance(schema, str):
        path = (base_dir or Path(".")) / schema
        try:
            kw["schema"] = json.loads(path.read_text())
        except OSError as err:
            raise ScenarioError(f"{source}: schema file {path}: {err.strerror}") from None
        except json.JSONDecodeError as err:
            raise ScenarioError(f"{path}:{err.lineno}: {err.msg}") from None
    elif schema is not None:
        kw["schema"] = schema
    if "chain" in data:
        kw["chain"] = _build(ChainSettings, data.pop("chain"), f"{source} [chain]")
    if "workload" in data:
        kw["workload"] = _build(Workload, data.pop("workload"), f"{source} [workload]")
    if "latency" in data:
        lat = data.pop("latency")
        kw["latency"] = _build(LatencyRange, {"low_us": int(lat.get("low_ms", 8) * US_PER_MS),
                                              "high_us": int(lat.get("high_ms", 10) * US_PER_MS)},
                               f"{source} [latency]")
    if "prices" in data:
        kw["prices"] = _build(UnitPrices, data.pop("prices"), f"{source} [prices]")
    if "faults" in data:
        f = dict(data.pop("faults"))
        crashes = tuple((c["node"], int(c["start_s"] * US_PER_S), int(c["end_s"] * US_PER_S))
                        for c in f.pop("crashes", []))
        kw["faults"] = _build(FaultPlan, {**f, "node_crashes": crashes}, f"{source} [faults]")
    if data:
        raise ScenarioError(f"{source}: unknown keys {sorted(data)}")
    return Scenario(**kw)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ScenarioError(f"{path}: {err.strerror}") from None
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        raise ScenarioError(f"{path}: {err}") from None
    return scenario_from_dict(data, path.parent, str(path))


# ---------------------------------------------------------------------------
# workload


def arrival_times(w: Workload, rng: random.Random) -> list[int]:
    total = int(round(w.rate * w.duration))
    horizon = int(w.duration * US_PER_S)
    if w.shape == "constant":
        return [int(i * US_PER_S / w.rate) for i in range(total)]
    if w.shape == "poisson":
        out, t = [], 0.0
        while True:
            t += rng.expovariate(w.rate)
            if t * US_PER_S >= horizon:
                return out
            out.append(int(t * US_PER_S))
    # burst: one second's worth of arrivals at the start of every second
    per = max(1, int(round(w.rate)))
    return [int(i // per) * US_PER_S for i in range(total)]


def generate_workload(scn: Scenario, spec: CompiledChainSpec, keyring: Keyring) -> list[tuple[int, LedgerEntry]]:
    w = scn.workload
    rng = random.Random(derive_seed(scn.seed, "workload"))
    clients = scn.client_ids()
    out = []
    for i, t in enumerate(arrival_times(w, rng)):
        row = f"h{rng.randrange(w.hot_rows)}" if rng.random() < w.conflict else f"r{i}"
        writes = tuple((data_key(w.table, row, f"f{k}"), encode_value(rng.randrange(1_000_000)))
                       for k in range(w.fields))
        tx = Transaction(tx_id=f"tx{i:07d}", submitter=clients[i % len(clients)], writes=writes,
                         latency_bound_ms=w.latency_bound_ms, schema_digest=spec.digest, submitted_at=t)
        out.append((t, LedgerEntry.wrap(sign_body(keyring, tx))))
    return out


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunReport:
    scenario: str
    seed: int
    submitted: int
    committed: int
    aborted: int
    rejected: int
    unresolved: int
    throughput_tps: float
    latency_ms: dict
    mean_batch_size: float
    blocks_committed: int
    blocks_aborted: int
    billing_total_usd: float
    billing_per_tx_usd: float
    billing_counts: dict
    node_digests: dict
    node_heights: dict
    crashed_at_end: list
    chain_verify: str
    audit_digest: str
    forgeries_attempted: int
    forgery_detections: int
    forged_commits: int
    resyncs: int
    violations: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@dataclass
class SimulationResult:
    scenario: Scenario
    net: ChainNetwork
    report: RunReport
    ledger_bytes: bytes
    submissions: list[tuple[int, LedgerEntry]]

    @property
    def ok(self) -> bool:
        return not self.report.violations


def _percentiles(values: list[float]) -> dict:
    if not values:
        return {"p50": 0.0, "p95": 0.0, "p99": 0.0}
    if len(values) == 1:
        return {"p50": values[0], "p95": values[0], "p99": values[0]}
    q = statistics.quantiles(values, n=100, method="inclusive")
    return {"p50": round(q[49], 3), "p95": round(q[94], 3), "p99": round(q[98], 3)}


def steady_throughput(commit_times_us: list[int], end_us: int) -> float:
    """Commits per second inside [5 %, 95 %] of the simulated span."""
    if not commit_times_us or end_us <= 0:
        return 0.0
    lo, hi = 0.05 * end_us, 0.95 * end_us
    n = sum(1 for t in commit_times_us if lo <= t <= hi)
    return round(n / ((hi - lo) / US_PER_S), 3)


def run_scenario(scn: Scenario, *, trace: bool = True, horizon_s: float = 600.0) -> SimulationResult:
    try:
        spec = compile_schema(scn.schema_doc())
    except SchemaError as err:
        raise ScenarioError(f"schema: {err}") from None
    keyring = Keyring(scn.seed)
    c = scn.chain
    config = make_chain_config(scn.node_ids(), keyring, scn.client_ids(), chain_id=c.chain_id,
                               policy=c.policy, max_block_size=c.max_block_size, leader_mode=c.leader_mode,
                               dedicated_leader=c.dedicated_leader,
                               default_latency_bound_ms=c.default_latency_bound_ms)
    net = provision_network(spec, config, keyring, faults=scn.faults, seed=scn.seed, latency=scn.latency,
                            prices=scn.unit_prices(), trace=EventTrace(enabled=trace),
                            forge_probability=scn.forge_probability)
    subs = generate_workload(scn, spec, keyring)
    for t, entry in subs:
        net.submit(entry, t)
    limit = int((scn.workload.duration + horizon_s) * US_PER_S)
    net.clock.run(until=limit)
    net.heal(net.clock.now)
    report = _report(scn, net, subs)
    return SimulationResult(scn, net, report, _export(net), subs)


def _export(net: ChainNetwork) -> bytes:
    return export_ledger(net.config, net.orchestrator.chain)


def _report(scn: Scenario, net: ChainNetwork, subs) -> RunReport:
    orch = net.orchestrator
    now = net.clock.now
    counts = {"committed": 0, "aborted": 0, "rejected": 0}
    lat, commit_times = [], []
    for _, e in subs:
        o = orch.outcomes.get(e.entry_id)
        if o is None:
            continue
        counts[o.status] += 1
        if o.status == "committed":
            lat.append((o.time - o.submitted_at) / US_PER_MS)
            commit_times.append(o.time)
    unresolved = len(subs) - sum(counts.values())
    blocks = orch.chain[1:]
    committed_blocks = [b for b in blocks if b.status == "committed"]
    n_bar = sum(len(b.entries) for b in committed_blocks) / len(committed_blocks) if committed_blocks else 0.0

    crashed = sorted(n for n in net.nodes if net.faults.is_crashed(n, now))
    digests = {nid: state_digest(node.state).hex() for nid, node in sorted(net.nodes.items())}
    heights = {nid: node.height for nid, node in sorted(net.nodes.items())}
    check = chain_verify(orch.chain, net.config)
    _, audit = audit_state_at(orch.chain, len(orch.chain) - 1)
    forged_commits = sum(1 for node in net.nodes.values()
                         for b in node.chain if b.content_hash in orch.forged_hashes)

    violations = []
    if unresolved:
        violations.append(f"{unresolved} submitted transactions have no terminal outcome")
    live = {digests[n] for n in net.nodes if n not in crashed}
    if len(live) > 1:
        violations.append("in-sync node state digests differ")
    if live and audit.hex() not in live:
        violations.append("replayed head state does not match live node state")
    if not check.ok:
        violations.append(f"chain_verify failed at height {check.first_invalid}: {check.reason}")
    if forged_commits:
        violations.append(f"{forged_commits} forged blocks committed by honest nodes")
    committed = counts["committed"]
    total = net.meter.total
    return RunReport(
        scenario=scn.name, seed=scn.seed, submitted=len(subs), committed=committed,
        aborted=counts["aborted"], rejected=counts["rejected"], unresolved=unresolved,
        throughput_tps=steady_throughput(commit_times, max(commit_times, default=0)),
        latency_ms=_percentiles(sorted(lat)), mean_batch_size=round(n_bar, 4),
        blocks_committed=len(committed_blocks), blocks_aborted=len(blocks) - len(committed_blocks),
        billing_total_usd=total, billing_per_tx_usd=total / committed if committed else 0.0,
        billing_counts=dict(net.meter.counts), node_digests=digests, node_heights=heights,
        crashed_at_end=crashed,
        chain_verify="ok" if check.ok else f"fail@{check.first_invalid}: {check.reason}",
        audit_digest=audit.hex(), forgeries_attempted=orch.forgeries, forgery_detections=orch.detections,
        forged_commits=forged_commits, resyncs=net.resyncs, violations=violations,
    )


# ---------------------------------------------------------------------------
# artifacts


def latency_csv(result: SimulationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tx_id", "status", "submitted_us", "resolved_us", "height", "latency_ms"])
    outcomes = result.net.orchestrator.outcomes
    for t, e in result.submissions:
        o = outcomes.get(e.entry_id)
        if o is None:
            w.writerow([e.entry_id, "unresolved", t, "", "", ""])
        else:
            w.writerow([e.entry_id, o.status, o.submitted_at, o.time, o.height, (o.time - o.submitted_at) / US_PER_MS])
    return buf.getvalue()


def blocks_csv(result: SimulationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["height", "block_id", "status", "leader", "entries", "lanes", "yes_votes", "timestamp_us"])
    for b in result.net.orchestrator.chain:
        w.writerow([b.height, b.block_id, b.status, b.leader, len(b.entries), len(b.schedule),
                    len(b.certificate.yes_voters()) if b.certificate else 0, b.timestamp])
    return buf.getvalue()


def write_artifacts(result: SimulationResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(result.report.to_json())
    (out / "ledger.bin").write_bytes(result.ledger_bytes)
    (out / "trace.log").write_text(result.net.trace.text())
    (out / "latencies.csv").write_text(latency_csv(result))
    (out / "blocks.csv").write_text(blocks_csv(result))
    return out


def with_seed(scn: Scenario, seed: int) -> Scenario:
    return replace(scn, seed=seed)


def constant_rate(rate: float, duration: float, *, nodes: int = 8, latency_bound_ms: int = 100,
                  max_block_size: int = 900, seed: int = 0, **workload: Any) -> Scenario:
    """Convenience constructor for constant-arrival scenarios."""
    return Scenario(
        name=f"constant-{rate:g}tps", seed=seed,
        chain=ChainSettings(nodes=nodes, max_block_size=max_block_size, default_latency_bound_ms=latency_bound_ms),
        workload=Workload(shape="constant", rate=rate, duration=duration, **workload),
    )


def analytic_batch(scn: Scenario) -> float:
    bound = scn.workload.latency_bound_ms or scn.chain.default_latency_bound_ms
    return min(scn.chain.max_block_size, max(1, math.floor(scn.workload.rate * bound / 1000)))
