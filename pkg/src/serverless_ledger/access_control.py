"""Per-field ACLs stored on the ledger.

Effective permissions are the schema's default ACLs overlaid with every
committed ``acl_update`` entry, in ledger order. Lookup prefers an exact
``table.field`` entry over the ``table.*`` wildcard; no entry means deny.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .ledger_model import ACLUpdate, Block, SchemaEvolution, Transaction
from .schema import CompiledChainSpec, compile_schema
from .state import PUBLIC, decode_principals, field_path_of, wildcard_of
from .substrate import KVStore


class UnknownFieldPath(KeyError):
    pass


@dataclass
class ACLState:
    spec: CompiledChainSpec
    overrides: dict[tuple[str, str], frozenset[str]] = field(default_factory=dict)

    def entry(self, path: str, mode: str) -> frozenset[str] | None:
        key = (path, mode)
        if key in self.overrides:
            return self.overrides[key]
        return self.spec.default_acl.get(key)

    def effective(self) -> dict[tuple[str, str], frozenset[str]]:
        out = dict(self.spec.default_acl)
        out.update(self.overrides)
        return out

    def resolves(self, path: str) -> bool:
        table, _, fname = path.partition(".")
        if fname == "*":
            return table in self.spec.tables
        return path in self.spec.fields

    def principals_for(self, path: str, mode: str) -> frozenset[str]:
        if not self.resolves(path):
            raise UnknownFieldPath(path)
        exact = self.entry(path, mode)
        if exact is not None:
            return exact
        if not path.endswith(".*"):
            wild = self.entry(wildcard_of(path), mode)
            if wild is not None:
                return wild
        return frozenset()

    def apply_update(self, update: ACLUpdate) -> None:
        self.overrides[(update.path, update.mode)] = frozenset(update.principals)

    @classmethod
    def from_store(cls, spec: CompiledChainSpec, store: KVStore) -> "ACLState":
        overrides = {}
        for key in store.keys("_acl/"):
            rest = key[len("_acl/"):]
            path, _, mode = rest.rpartition("/")
            overrides[(path, mode)] = decode_principals(store.value(key))
        return cls(spec, overrides)


def check_access(acl: ACLState, principal: str, path: str, mode: str) -> bool:
    """True if ``principal`` may ``mode`` (read/write) the field at ``path``."""
    allowed = acl.principals_for(path, mode)
    return PUBLIC in allowed or principal in allowed


def unauthorized_writes(acl: ACLState, tx: Transaction) -> list[str]:
    bad = []
    for key, _ in tx.writes:
        try:
            path = field_path_of(key)
            ok = check_access(acl, tx.submitter, path, "write")
        except (ValueError, UnknownFieldPath):
            ok = False
            path = key
        if not ok:
            bad.append(path)
    return bad


def authorize_acl_update(acl: ACLState, update: ACLUpdate) -> str | None:
    """Reason the update is not allowed, or None. Only current writers may change a path's ACL."""
    if not acl.resolves(update.path):
        return f"{update.path}: does not resolve in schema"
    if not check_access(acl, update.submitter, update.path, "write"):
        return f"{update.path}: {update.submitter} is not a current writer"
    return None


def scoped_read(store: KVStore, acl: ACLState, principal: str, keys: Iterable[str] | None = None,
                table: str | None = None) -> dict[str, bytes]:
    """Visible subset of user data. Denied fields are omitted, not blanked."""
    if keys is None:
        prefix = f"{table}/" if table else ""
        candidates = [k for k in store.keys(prefix) if not k.startswith("_")]
    else:
        candidates = list(keys)
    out = {}
    for key in candidates:
        value = store.value(key)
        if value is None:
            continue
        try:
            path = field_path_of(key)
            if check_access(acl, principal, path, "read"):
                out[key] = value
        except (ValueError, UnknownFieldPath):
            continue
    return out


def materialize_acl(ledger: list[Block], height: int | None = None) -> ACLState:
    """Rebuild ACLState from committed ledger entries up to ``height`` inclusive."""
    spec = None
    overrides: dict[tuple[str, str], frozenset[str]] = {}
    for block in ledger:
        if height is not None and block.height > height:
            break
        if block.status != "committed":
            continue
        for e in block.entries:
            if isinstance(e.body, SchemaEvolution):
                spec = compile_schema(e.body.document)
            elif isinstance(e.body, ACLUpdate):
                overrides[(e.body.path, e.body.mode)] = frozenset(e.body.principals)
    if spec is None:
        raise ValueError("ledger carries no schema")
    return ACLState(spec, overrides)


def lineage(ledger: list[Block], path: str) -> list[tuple[int, ACLUpdate]]:
    out = []
    for block in ledger:
        if block.status != "committed":
            continue
        for e in block.entries:
            if isinstance(e.body, ACLUpdate) and e.body.path == path:
                out.append((block.height, e.body))
    return out


def lineage_report(ledger: list[Block], path: str) -> str:
    return "".join(f"{h}|{u.path}|{u.mode}|{','.join(u.principals)}\n" for h, u in lineage(ledger, path))


def visible_row_fields(acl: ACLState, principal: str, table: str) -> list[str]:
    return [f for f in acl.spec.tables.get(table, []) if check_access(acl, principal, f"{table}.{f}", "read")]
