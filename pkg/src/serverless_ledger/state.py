"""World-state key layout and the state effect of each ledger entry.

User data lives under ``table/row/field``. Metadata shares the same store:
``_meta/schema``, ``_meta/schema_doc``, ``_meta/code/<name>@<version>`` and
``_acl/<path>/<mode>``. Every node, the resync path and the audit replay
all go through ``entry_writes`` so that they agree on effects.
"""
from __future__ import annotations

import re

from .ledger_model import (
    ACLUpdate,
    CodeAgreement,
    LedgerEntry,
    SchemaEvolution,
    SoftwareUpdate,
    Transaction,
    canonical_encode,
    decode,
    hash_content,
)
from .substrate import KVStore

NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
SCHEMA_KEY = "_meta/schema"
SCHEMA_DOC_KEY = "_meta/schema_doc"
PUBLIC = "*"


def data_key(table: str, row: str, field: str) -> str:
    return f"{table}/{row}/{field}"


def parse_data_key(key: str) -> tuple[str, str, str]:
    """Split ``table/row/field``; raises ValueError for anything else."""
    parts = key.split("/")
    if len(parts) != 3 or not NAME_RE.match(parts[0]) or not NAME_RE.match(parts[2]) or not parts[1]:
        raise ValueError(f"malformed data key {key!r}")
    return parts[0], parts[1], parts[2]


def field_path_of(key: str) -> str:
    table, _, field = parse_data_key(key)
    return f"{table}.{field}"


def acl_key(path: str, mode: str) -> str:
    return f"_acl/{path}/{mode}"


def code_key(name: str, version: int) -> str:
    return f"_meta/code/{name}@{version}"


def wildcard_of(path: str) -> str:
    return path.split(".", 1)[0] + ".*"


def encode_principals(principals) -> bytes:
    return canonical_encode(tuple(sorted(set(principals))))


def decode_principals(raw: bytes) -> frozenset[str]:
    return frozenset(decode(raw))


def entry_writes(entry: LedgerEntry) -> list[tuple[str, bytes]]:
    body = entry.body
    if isinstance(body, Transaction):
        return list(body.writes)
    if isinstance(body, ACLUpdate):
        return [(acl_key(body.path, body.mode), encode_principals(body.principals))]
    if isinstance(body, SchemaEvolution):
        return [(SCHEMA_KEY, body.digest), (SCHEMA_DOC_KEY, body.document)]
    if isinstance(body, CodeAgreement):
        return [(code_key(r.name, r.version), r.digest) for r in body.refs]
    if isinstance(body, SoftwareUpdate):
        return [(code_key(body.ref.name, body.ref.version), body.ref.digest)]
    raise TypeError(type(body).__name__)


def entry_reads(entry: LedgerEntry) -> list[str]:
    """Keys whose value the entry's validity depends on, beyond its own writes."""
    body = entry.body
    if isinstance(body, Transaction):
        keys = [k for k, _ in body.reads]
        for k, _ in body.writes:
            try:
                path = field_path_of(k)
            except ValueError:
                continue
            keys.append(acl_key(path, "write"))
            keys.append(acl_key(wildcard_of(path), "write"))
        return keys
    if isinstance(body, ACLUpdate):
        keys = [acl_key(body.path, "write")]
        if not body.path.endswith(".*"):
            keys.append(acl_key(wildcard_of(body.path), "write"))
        return keys
    return []


def apply_entry(store: KVStore, entry: LedgerEntry) -> None:
    for key, value in entry_writes(entry):
        store.write_conditional(key, value, store.version(key))


def state_digest(store: KVStore | dict) -> bytes:
    entries = store.entries if isinstance(store, KVStore) else store
    triples = tuple((k, entries[k][0], entries[k][1]) for k in sorted(entries))
    return hash_content(canonical_encode(triples))
