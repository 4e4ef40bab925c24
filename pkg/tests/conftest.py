import pytest
from hypothesis import settings

from serverless_ledger.ledger_model import ACLUpdate, Keyring, LedgerEntry, Transaction, sign_body
from serverless_ledger.network import make_chain_config, provision_network
from serverless_ledger.schema import compile_schema, encode_value

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ASSET_SCHEMA = {
    "tables": [
        {"name": "asset", "fields": [
            {"name": "owner", "type": "string", "required": True, "maxLength": 16, "pattern": "^[a-z0-9]+$"},
            {"name": "qty", "type": "integer", "minimum": 0, "maximum": 1000},
            {"name": "price", "type": "decimal", "minimum": "0.00"},
            {"name": "parent", "type": "reference", "table": "asset"},
        ]},
        {"name": "note", "fields": [
            {"name": "text", "type": "string", "maxLength": 32},
            {"name": "blob", "type": "bytes", "maxLength": 8},
            {"name": "flag", "type": "boolean"},
        ]},
    ],
    "default_acl": {
        "asset.*": {"read": ["*"], "write": ["c0", "c1"]},
        "asset.price": {"read": ["c0"], "write": ["c0"]},
        "note.*": {"read": ["*"], "write": ["*"]},
    },
}


def build_net(nodes=4, clients=("c0", "c1", "c2"), schema=None, policy="majority", seed=0, faults=None,
              max_block_size=900, bound_ms=100, **kw):
    keyring = Keyring(seed)
    spec = compile_schema(schema or ASSET_SCHEMA)
    config = make_chain_config([f"n{i}" for i in range(nodes)], keyring, list(clients), policy=policy,
                               max_block_size=max_block_size, default_latency_bound_ms=bound_ms)
    return provision_network(spec, config, keyring, faults=faults, seed=seed, **kw)


def make_tx(net, tx_id, submitter, writes, reads=(), **kw):
    body = Transaction(
        tx_id=tx_id, submitter=submitter,
        writes=tuple((k, v if isinstance(v, bytes) else encode_value(v)) for k, v in writes.items()),
        reads=tuple(reads), schema_digest=kw.pop("schema_digest", net.spec.digest), **kw)
    return LedgerEntry.wrap(sign_body(net.keyring, body))


def make_acl(net, update_id, submitter, path, mode, principals):
    body = ACLUpdate(update_id, submitter, path, mode, tuple(sorted(set(principals))))
    return LedgerEntry.wrap(sign_body(net.keyring, body))


def drain(net, extra_s=5):
    net.clock.run(until=net.clock.now + int(extra_s * 1_000_000) + 60_000_000)
    net.heal(net.clock.now)


@pytest.fixture
def net():
    return build_net()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
