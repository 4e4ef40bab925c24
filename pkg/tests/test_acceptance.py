"""End-to-end acceptance checks; each test records one PASS/FAIL line in the terminal summary."""
import functools
import random
import struct
import time

import pytest

from conftest import ACCEPTANCE_LINES, build_net, drain, make_acl, make_tx
from serverless_ledger.access_control import ACLState, check_access, materialize_acl, scoped_read
from serverless_ledger.consensus import BlockProposal, InvalidCertificate, apply_lanes, partition_conflicts
from serverless_ledger.costmodel import (
    DEFAULT_SERVERFUL,
    calibrate_serverless,
    generate_cost_curve,
    parse_grid,
    per_tx_cost_serverful,
    per_tx_cost_serverless,
)
from serverless_ledger.integrity import chain_verify, load_ledger, verify_ledger_bytes
from serverless_ledger.ledger_model import Block, LedgerEntry, Transaction, VoteCertificate, block_id_for, make_vote
from serverless_ledger.quorum import VotePolicy, check_certificate
from serverless_ledger.simulation import (
    ChainSettings,
    Scenario,
    Workload,
    constant_rate,
    load_scenario,
    run_scenario,
)
from serverless_ledger.state import data_key, entry_writes, state_digest
from serverless_ledger.substrate import US_PER_S, FaultPlan, KVStore


def criterion(number, title, budget_s):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*a, **kw):
            t0 = time.perf_counter()
            try:
                detail = fn(*a, **kw) or ""
                elapsed = time.perf_counter() - t0
                assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
            except BaseException as err:
                ACCEPTANCE_LINES.append(f"[{number:2d}] FAIL {title}: {err}".splitlines()[0])
                raise
            ACCEPTANCE_LINES.append(f"[{number:2d}] PASS {title} ({elapsed:.1f}s) {detail}".rstrip())
        return run
    return wrap


# ---------------------------------------------------------------------------
# 1, 2: cost model


@criterion(1, "cost anchors", 1)
def test_01_cost_anchors():
    params = calibrate_serverless()
    one, full = per_tx_cost_serverless(params, 1), per_tx_cost_serverless(params, 900)
    assert abs(one - 1e-4) / 1e-4 < 0.01
    assert abs(full - 1e-5) / 1e-5 < 0.01
    return f"cost(1)={one:.3e} cost(900)={full:.3e}"


@criterion(2, "cost crossover", 1)
def test_02_cost_crossover():
    params = calibrate_serverless()
    grid = parse_grid("1:20001:10")
    curve = generate_cost_curve(params, DEFAULT_SERVERFUL, grid)
    lo = [r for r in curve.rows if r[0] <= 1]
    assert lo and all(r[1] < min(r[2:]) for r in lo), "serverless must win at the lowest throughput"
    above = {}
    for j, name in enumerate(curve.configs):
        x = curve.crossovers[name]
        if x is None:
            continue
        assert all(r[1] <= r[2 + j] for r in curve.rows if r[0] < x)
        # beyond the crossover the serverful config stays cheaper
        assert all(r[2 + j] < r[1] for r in curve.rows if r[0] >= x)
        above[name] = x
    assert above, "no serverful config ever becomes cheaper"
    for cfg in DEFAULT_SERVERFUL:
        base = per_tx_cost_serverful(cfg, 100).usd_per_tx
        for tps in grid:
            assert per_tx_cost_serverful(cfg, tps).usd_per_tx * tps == pytest.approx(base * 100, rel=1e-12)
    return "crossovers " + " ".join(f"{k}={v:g}" for k, v in above.items())


# ---------------------------------------------------------------------------
# 3: parallel lanes vs sequential oracle


def sequential_digest(entries):
    state = {}
    for e in entries:
        for k, v in entry_writes(e):
            state[k] = (v, state.get(k, (None, 0))[1] + 1)
    return state_digest(state)


@criterion(3, "oracle equivalence", 120)
def test_03_oracle_equivalence():
    from concurrent.futures import ThreadPoolExecutor

    rnd = random.Random(2024)
    with ThreadPoolExecutor(4) as pool:
        for trial in range(100):
            n_tx = rnd.randint(1, 5000)
            rows = max(1, int(n_tx * rnd.choice([0.001, 0.01, 0.1, 0.5, 2.0])))
            nodes = rnd.randint(1, 8)
            entries = []
            for i in range(n_tx):
                writes = {data_key("kv", f"r{rnd.randrange(rows)}", f"f{rnd.randrange(3)}")
                          for _ in range(rnd.randint(1, 3))}
                reads = {data_key("kv", f"r{rnd.randrange(rows)}", "f0") for _ in range(rnd.randint(0, 2))}
                entries.append(LedgerEntry.wrap(Transaction(
                    f"t{i}", "c0", tuple((k, b"%d.%d" % (trial, i)) for k in sorted(writes)),
                    reads=tuple((k, 0) for k in sorted(reads)))))
            schedule = partition_conflicts(entries)
            expected = sequential_digest(entries)
            for node in range(nodes):
                order = list(range(len(schedule)))
                random.Random(trial * 10 + node).shuffle(order)
                store = KVStore(f"n{node}")
                apply_lanes(store, entries, schedule, order, pool if node % 2 else None)
                assert state_digest(store) == expected, f"trial {trial} node {node}"
    # the same property through full protocol runs
    for seed in range(3):
        res = run_scenario(Scenario(seed=seed, chain=ChainSettings(nodes=5),
                                    workload=Workload(shape="poisson", rate=150, duration=2, conflict=0.5,
                                                      hot_rows=4, fields=2)), trace=False)
        r = res.report
        assert not r.violations, r.violations
        assert set(r.node_digests.values()) == {r.audit_digest}
    return "100 randomized blocks + 3 protocol runs"


# ---------------------------------------------------------------------------
# 4: tamper detection


def record_spans(data):
    spans, pos = [], 0
    while pos < len(data):
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        spans.append((pos, pos + 4 + n))
        pos += 4 + n
    return spans


@criterion(4, "tamper detection", 60)
def test_04_tamper_detection():
    exports = []
    for seed, shape in ((1, "constant"), (2, "poisson")):
        scn = Scenario(seed=seed, chain=ChainSettings(nodes=4),
                       workload=Workload(shape=shape, rate=60, duration=1, fields=2))
        exports.append(run_scenario(scn, trace=False).ledger_bytes)
    for data in exports:
        assert verify_ledger_bytes(data).ok, "false positive on pristine export"
        loaded = load_ledger(data)
        assert chain_verify(loaded.blocks, loaded.config).ok
    rnd = random.Random(77)
    caught = 0
    for i in range(1000):
        data = exports[i % len(exports)]
        spans = record_spans(data)
        pos = rnd.randrange(len(data))
        bad = bytearray(data)
        bad[pos] ^= 1 << rnd.randrange(8)
        idx = next(k for k, (a, b) in enumerate(spans) if a <= pos < b)
        check = verify_ledger_bytes(bytes(bad))
        assert not check.ok, f"flip at byte {pos} not detected"
        assert check.first_invalid == max(idx - 1, 0), f"flip at byte {pos}: {check}"
        caught += 1
    return f"{caught}/1000 flips at the right height"


# ---------------------------------------------------------------------------
# 5: quorum enforcement


def _block_on(node, net, attempt):
    entry = make_tx(net, f"q{node.height}.{attempt}", "c0", {f"asset/q{attempt}/owner": "x"})
    block = Block(height=node.height + 1, block_id=block_id_for(node.height + 1, attempt), timestamp=attempt,
                  leader="n0", orchestration_digest=net.config.orchestrator_digest,
                  config_digest=net.config.digest, prev_hash=node.head_hash,
                  entries=(entry,), schedule=((0,),)).sealed()
    return BlockProposal(block, net.config.orchestrator_digest)


@criterion(5, "quorum enforcement", 10)
def test_05_quorum_enforcement():
    expected = {"majority": lambda n: n // 2 + 1, "bft_majority": lambda n: (2 * n) // 3 + 1, "all": lambda n: n}
    cases = 0
    for n in (1, 4, 7, 8):
        for policy, fn in expected.items():
            net = build_net(nodes=n, policy=policy)
            t = fn(n)
            assert VotePolicy(policy, n).threshold == t
            node = net.nodes["n0"]
            ids = net.config.node_ids
            for yes in range(n + 1):
                prop = _block_on(node, net, yes)
                assert node.handle_verify(prop).verdict == "yes"
                b = prop.block
                votes = tuple(make_vote(net.keyring, v, b, "yes" if i < yes else "no") for i, v in enumerate(ids))
                cert = VoteCertificate(b.block_id, b.content_hash, votes)
                assert check_certificate(cert, b.block_id, b.content_hash, net.config).ok == (yes >= t)
                before = node.height
                if yes >= t:
                    assert node.handle_apply(b.block_id, cert) == "ack"
                    assert node.chain[-1].status == "committed"
                else:
                    with pytest.raises(InvalidCertificate):
                        node.handle_apply(b.block_id, cert)
                    assert node.height == before
                    assert node.handle_abort(b.block_id, cert) == "ack"
                    assert node.chain[-1].status == "aborted"
                    assert node.state.value(f"asset/q{yes}/owner") is None
                cases += 1
            assert chain_verify(node.chain, net.config).ok
    return f"{cases} (N, policy, yes) cases"


# ---------------------------------------------------------------------------
# 6: nefarious orchestrator


@criterion(6, "nefarious orchestrator", 60)
def test_06_nefarious_orchestrator():
    attempted = detections = 0
    for seed in range(50):
        scn = Scenario(seed=seed, chain=ChainSettings(nodes=4 + seed % 4, policy=("majority", "bft_majority")[seed % 2]),
                       workload=Workload(shape="poisson", rate=40, duration=1, conflict=0.3),
                       faults=FaultPlan(nefarious_orchestrator=True), forge_probability=0.5)
        r = run_scenario(scn, trace=False).report
        assert r.forged_commits == 0, f"seed {seed}: forged block committed"
        assert not r.violations, f"seed {seed}: {r.violations}"
        assert r.committed == r.submitted
        attempted += r.forgeries_attempted
        detections += r.forgery_detections
    assert attempted >= 50
    return f"{attempted} forgeries, {detections} refusals, 0 forged commits"


# ---------------------------------------------------------------------------
# 7: crash and resync


@criterion(7, "crash + resync convergence", 60)
def test_07_crash_resync():
    runs = 0
    for n, policy in ((4, "majority"), (7, "bft_majority"), (8, "majority"), (5, "all")):
        tolerated = VotePolicy(policy, n).tolerated_faults
        for seed in range(3):
            rnd = random.Random(seed * 31 + n)
            victims = rnd.sample([f"n{i}" for i in range(n)], tolerated)
            crashes = []
            for v in victims:
                start = rnd.randrange(0, 1_500_000)
                crashes.append((v, start, start + rnd.randrange(200_000, 1_500_000)))
            scn = Scenario(seed=seed, chain=ChainSettings(nodes=n, policy=policy),
                           workload=Workload(rate=60, duration=2),
                           faults=FaultPlan(node_crashes=tuple(crashes)))
            r = run_scenario(scn, trace=False).report
            assert r.committed == r.submitted, f"{n}/{policy}/{seed}: {r.committed}/{r.submitted}"
            assert len(set(r.node_digests.values())) == 1, f"{n}/{policy}/{seed}: digests diverge"
            assert len(set(r.node_heights.values())) == 1
            assert not r.violations, r.violations
            runs += 1
    return f"{runs} runs"


# ---------------------------------------------------------------------------
# 8: overload


@criterion(8, "overload resilience", 60)
def test_08_overload():
    # tiny blocks cap the service rate; measure it, then drive at least 10x
    probe = run_scenario(constant_rate(400, 1, nodes=4, max_block_size=2, seed=1), trace=False).net.orchestrator
    committed_rounds = [r for r in probe.rounds if r.outcome == "committed"]
    span = (committed_rounds[-1].end - committed_rounds[0].start) / US_PER_S
    service = sum(len(r.block.entries) for r in committed_rounds) / span
    offered = 10 * service
    res = run_scenario(constant_rate(offered, 3, nodes=4, max_block_size=2, seed=2), trace=False)
    r = res.report
    assert r.committed == r.submitted, f"{r.submitted - r.committed} acknowledged txs lost"
    assert not r.violations, r.violations
    times = [b.timestamp for b in res.net.orchestrator.chain[1:]]
    gaps = [b - a for a, b in zip(times, times[1:])]
    assert max(gaps) < US_PER_S, "block production stalled"
    return f"service {service:.0f} tx/s, offered {offered:.0f} tx/s, {r.committed} committed"


# ---------------------------------------------------------------------------
# 9: ACL soundness

ACL_SCHEMA = {
    "tables": [{"name": "doc", "fields": [{"name": f"f{i}", "type": "integer"} for i in range(4)]}],
    "default_acl": {},
}
PRINCIPALS = ["c0", "c1", "c2", "c3"]


def _oracle_allows(table, principal, path, mode):
    allowed = table.get((path, mode))
    if allowed is None:
        allowed = table.get(("doc.*", mode), frozenset())
    return "*" in allowed or principal in allowed


@criterion(9, "ACL soundness", 60)
def test_09_acl_soundness():
    checked_tx = 0
    for trial in range(12):
        rnd = random.Random(500 + trial)
        paths = ["doc.*"] + [f"doc.f{i}" for i in range(4)]
        schema = {**ACL_SCHEMA, "default_acl": {
            p: {m: sorted(rnd.sample(PRINCIPALS + ["*"], rnd.randint(1, 2))) for m in ("read", "write")}
            for p in rnd.sample(paths, rnd.randint(1, 3))}}
        schema["default_acl"].setdefault("doc.*", {"read": ["c0"], "write": ["c0"]})
        net = build_net(clients=tuple(PRINCIPALS), schema=schema, seed=trial)
        table = dict(net.spec.default_acl)
        t = 0
        for u in range(8):
            who, path, mode = rnd.choice(PRINCIPALS), rnd.choice(paths), rnd.choice(["read", "write"])
            principals = rnd.sample(PRINCIPALS + ["*"], rnd.randint(1, 3))
            net.submit(make_acl(net, f"u{u}", who, path, mode, principals), t)
            drain(net, extra_s=0)
            t = net.clock.now
            ok = _oracle_allows(table, who, path, "write")
            assert (net.orchestrator.outcomes[f"u{u}"].status == "committed") == ok
            if ok:
                table[(path, mode)] = frozenset(principals)
        txs = []
        for i in range(40):
            who = rnd.choice(PRINCIPALS)
            fields = rnd.sample(range(4), rnd.randint(1, 2))
            e = make_tx(net, f"t{i}", who, {f"doc/r{rnd.randrange(6)}/f{f}": i for f in fields})
            txs.append((e, who, fields))
            net.submit(e, t + i * 5_000)
        drain(net)
        node = net.nodes["n1"]
        acl = ACLState.from_store(net.spec, node.state)
        for e, who, fields in txs:
            allowed = all(check_access(acl, who, f"doc.f{f}", "write") for f in fields)
            assert allowed == all(_oracle_allows(table, who, f"doc.f{f}", "write") for f in fields)
            assert (net.orchestrator.outcomes[e.entry_id].status == "committed") == allowed, e.entry_id
            checked_tx += 1
        for p in PRINCIPALS + ["outsider"]:
            seen = scoped_read(node.state, acl, p)
            for key in node.state.keys("doc/"):
                path = "doc." + key.rsplit("/", 1)[1]
                assert (key in seen) == _oracle_allows(table, p, path, "read")
        rebuilt = materialize_acl(net.orchestrator.chain)
        assert rebuilt.effective() == acl.effective() == table
    return f"12 permission matrices, {checked_tx} txs"


# ---------------------------------------------------------------------------
# 10: batching and billing


@criterion(10, "latency/batching behaviour", 60)
def test_10_batching_and_billing():
    params = calibrate_serverless()
    out = []
    for rate, bound_ms, duration in ((100, 100, 5), (500, 100, 2), (50, 200, 6), (20, 20, 5),
                                     (2000, 100, 1), (12000, 100, 0.5)):
        scn = constant_rate(rate, duration, nodes=4, latency_bound_ms=bound_ms, seed=rate)
        r = run_scenario(scn, trace=False).report
        target = min(900, max(1, rate * bound_ms / 1000))
        assert abs(r.mean_batch_size - target) <= 0.2 * target, (rate, bound_ms, r.mean_batch_size, target)
        model = per_tx_cost_serverless(params, r.mean_batch_size)
        assert abs(r.billing_per_tx_usd - model) <= 0.1 * model, (rate, r.billing_per_tx_usd, model)
        out.append(f"{rate:g}@{bound_ms}ms:n={r.mean_batch_size:.1f}")
    return " ".join(out)


# ---------------------------------------------------------------------------
# 11: determinism


@criterion(11, "determinism", 30)
def test_11_determinism():
    for name in ("baseline", "crash", "nefarious", "assets"):
        scn = load_scenario(f"scenarios/{name}.toml")
        a, b = run_scenario(scn), run_scenario(scn)
        assert a.ledger_bytes == b.ledger_bytes, name
        assert a.report.to_json() == b.report.to_json(), name
        assert a.net.trace.text() == b.net.trace.text(), name
    return "4 shipped scenarios, run twice each"
