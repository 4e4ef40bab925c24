import random
import struct
from dataclasses import replace

import pytest

from conftest import build_net, drain, make_tx
from serverless_ledger.integrity import (
    audit_bytes,
    audit_state_at,
    chain_verify,
    export_ledger,
    load_ledger,
    replay,
    verify_agreement,
    verify_code_agreements,
    verify_ledger_bytes,
)
from serverless_ledger.ledger_model import Vote, VoteCertificate
from serverless_ledger.quorum import VotePolicy
from serverless_ledger.state import state_digest


@pytest.fixture(scope="module")
def chain_net():
    net = build_net()
    t = 0
    for i in range(40):
        net.submit(make_tx(net, f"t{i}", "c0", {f"asset/a{i % 7}/owner": f"o{i}"}), t)
        t += 60_000
    drain(net)
    return net


def record_spans(data):
    spans, pos = [], 0
    while pos < len(data):
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        spans.append((pos, pos + 4 + n))
        pos += 4 + n
    return spans


def test_export_roundtrip(chain_net):
    chain = chain_net.orchestrator.chain
    data = export_ledger(chain_net.config, chain)
    loaded = load_ledger(data)
    assert loaded.error is None
    assert loaded.config == chain_net.config
    assert loaded.blocks == chain
    assert len(chain) > 3
    assert verify_ledger_bytes(data).ok


def test_replay_matches_live_nodes(chain_net):
    chain = chain_net.orchestrator.chain
    live = state_digest(chain_net.nodes["n1"].state)
    assert state_digest(replay(chain)) == live
    snap, digest = audit_state_at(chain, len(chain) - 1, chain_net.config)
    assert digest == live
    snap1, _ = audit_state_at(chain, 1)
    assert len(snap1) <= len(snap)


def test_tampered_block_caught_at_its_height(chain_net):
    chain = list(chain_net.orchestrator.chain)
    chain[2] = replace(chain[2], timestamp=chain[2].timestamp + 1)
    check = chain_verify(chain, chain_net.config)
    assert not check.ok and check.first_invalid == 2
    chain = list(chain_net.orchestrator.chain)
    chain[3] = replace(chain[3], prev_hash=bytes(32))
    assert chain_verify(chain, chain_net.config).first_invalid == 3


def test_removed_vote_breaks_agreement(chain_net):
    chain = list(chain_net.orchestrator.chain)
    b = chain[1]
    policy = VotePolicy.of(chain_net.config)
    assert verify_agreement(b, policy, chain_net.config).ok
    thin = VoteCertificate(b.block_id, b.content_hash, b.certificate.votes[:1])
    assert not verify_agreement(replace(b, certificate=thin), policy, chain_net.config).ok
    bogus = b.certificate.votes[:-1] + (Vote(b.certificate.votes[-1].node_id, "yes", bytes(64)),)
    rep = verify_agreement(replace(b, certificate=VoteCertificate(b.block_id, b.content_hash, bogus)),
                           policy, chain_net.config)
    assert len(rep.valid_yes) == len(b.certificate.votes) - 1


def test_bit_flips_attributed_to_record(chain_net):
    data = export_ledger(chain_net.config, chain_net.orchestrator.chain)
    spans = record_spans(data)
    rnd = random.Random(11)
    for _ in range(150):
        pos = rnd.randrange(len(data))
        bad = bytearray(data)
        bad[pos] ^= 1 << rnd.randrange(8)
        idx = next(i for i, (a, b) in enumerate(spans) if a <= pos < b)
        check = verify_ledger_bytes(bytes(bad))
        assert not check.ok
        assert check.first_invalid == max(idx - 1, 0), (pos, idx, check)


def test_truncation_and_empty():
    assert verify_ledger_bytes(b"").reason == "empty ledger file"
    net = build_net()
    data = export_ledger(net.config, net.orchestrator.chain)
    assert not verify_ledger_bytes(data[:-1]).ok
    assert not verify_ledger_bytes(data + b"\x00").ok


def test_audit_report_lines(chain_net):
    data = export_ledger(chain_net.config, chain_net.orchestrator.chain)
    rep = audit_bytes(data)
    assert rep.ok
    top = len(chain_net.orchestrator.chain) - 1
    assert rep.lines[0] == f"{top}|chain_verify|ok"
    assert rep.lines[1].startswith("0|agreement|ok committed yes=4/")
    assert rep.lines[-1] == f"{top}|state_digest|{state_digest(chain_net.nodes['n0'].state).hex()}"
    bad = bytearray(data)
    bad[-10] ^= 0x01
    rep = audit_bytes(bytes(bad))
    assert not rep.ok and rep.lines[0].startswith(f"{top}|chain_verify|FAIL")


def test_code_agreements_checked_against_blobs(chain_net):
    chain = chain_net.orchestrator.chain
    stores = {n: a.blobs for n, a in chain_net.accounts.items()}
    res = verify_code_agreements(chain, stores)
    assert res.ok and res.checked == 2
    ref = chain[0].entries[1].body.refs[0]
    stores["n2"].objects.pop(ref.blob_key)
    res = verify_code_agreements(chain, stores)
    assert not res.ok
    assert [(m.store, m.problem) for m in res.mismatches] == [("n2", "missing blob")]
