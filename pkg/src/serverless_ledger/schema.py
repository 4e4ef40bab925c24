"""Data-model compiler and transaction payload validation.

A schema document is JSON with a restricted JSON-Schema-like vocabulary::

    {
      "tables": [
        {"name": "asset", "fields": [
          {"name": "owner", "type": "string", "required": true, "maxLength": 64},
          {"name": "qty", "type": "integer", "minimum": 0},
          {"name": "parent", "type": "reference", "table": "asset"}
        ]}
      ],
      "default_acl": {
        "asset.*": {"read": ["*"], "write": ["org1"]},
        "asset.qty": {"write": ["org1", "org2"]}
      }
    }

Field values inside transactions are JSON-encoded scalars.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Any, Callable

from .ledger_model import Transaction, canonical_encode, entity, hash_content
from .state import NAME_RE, PUBLIC, parse_data_key

FIELD_TYPES = ("string", "integer", "decimal", "boolean", "bytes", "reference")
_CONSTRAINT_KEYS = {
    "string": {"minLength", "maxLength", "pattern"},
    "bytes": {"minLength", "maxLength"},
    "integer": {"minimum", "maximum"},
    "decimal": {"minimum", "maximum"},
    "boolean": set(),
    "reference": {"table"},
}
_HEX_RE = re.compile(r"^(?:[0-9a-f]{2})*$")


class SchemaError(ValueError):
    """Compile failure; ``problems`` holds ``(path, message)`` pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("\n".join(f"{p}: {m}" for p, m in problems))


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@entity
@dataclass(frozen=True)
class FieldSpec:
    path: str
    type: str
    required: bool
    minimum: str | None = None
    maximum: str | None = None
    min_length: int | None = None
    max_length: int | None = None
    pattern: str | None = None
    ref_table: str | None = None


@entity
@dataclass(frozen=True)
class AclDefault:
    path: str
    mode: str
    principals: tuple


@dataclass
class CompiledChainSpec:
    fields: dict[str, FieldSpec]
    default_acl: dict[tuple[str, str], frozenset[str]]
    document: bytes
    digest: bytes
    tables: dict[str, list[str]] = field(default_factory=dict)

    def lookup(self, path: str) -> FieldSpec | None:
        return self.fields.get(path)

    def required_fields(self, table: str) -> list[str]:
        return [f for f in self.tables.get(table, []) if self.fields[f"{table}.{f}"].required]


def _num(v: Any) -> str | None:
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ValueError("bound must be a number")
    try:
        d = Decimal(str(v))
    except InvalidOperation:
        raise ValueError(f"bad numeric bound {v!r}") from None
    return str(d.normalize())


def _registry_bytes(fields: dict[str, FieldSpec], acl: dict[tuple[str, str], frozenset[str]]) -> bytes:
    return canonical_encode((
        tuple(fields[p] for p in sorted(fields)),
        tuple(AclDefault(p, m, tuple(sorted(acl[(p, m)]))) for p, m in sorted(acl)),
    ))


def load_schema_doc(text: str | bytes) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError([("$", f"invalid JSON: {e.msg} (line {e.lineno})")]) from None
    if not isinstance(doc, dict):
        raise SchemaError([("$", "schema document must be an object")])
    return doc


def compile_schema(doc: dict | str | bytes) -> CompiledChainSpec:
    if not isinstance(doc, dict):
        doc = load_schema_doc(doc)
    problems: list[tuple[str, str]] = []
    fields: dict[str, FieldSpec] = {}
    tables: dict[str, list[str]] = {}
    pending_refs: list[tuple[str, str]] = []

    raw_tables = doc.get("tables")
    if not isinstance(raw_tables, list) or not raw_tables:
        raise SchemaError([("tables", "must be a non-empty list")])

    for ti, t in enumerate(raw_tables):
        tname = t.get("name") if isinstance(t, dict) else None
        if not isinstance(tname, str) or not NAME_RE.match(tname):
            problems.append((f"tables[{ti}]", f"invalid table name {tname!r}"))
            continue
        if tname in tables:
            problems.append((tname, "duplicate table name"))
            continue
        tables[tname] = []
        raw_fields = t.get("fields")
        if not isinstance(raw_fields, list) or not raw_fields:
            problems.append((tname, "fields must be a non-empty list"))
            continue
        for f in raw_fields:
            fname = f.get("name") if isinstance(f, dict) else None
            if not isinstance(fname, str) or not NAME_RE.match(fname):
                problems.append((f"{tname}.?", f"invalid field name {fname!r}"))
                continue
            path = f"{tname}.{fname}"
            if fname in tables[tname]:
                problems.append((path, "duplicate field name"))
                continue
            ftype = f.get("type")
            if ftype not in FIELD_TYPES:
                problems.append((path, f"unsupported type {ftype!r}"))
                continue
            unknown = set(f) - {"name", "type", "required"} - _CONSTRAINT_KEYS[ftype]
            if unknown:
                problems.append((path, f"unsupported constraint(s) {sorted(unknown)} for {ftype}"))
                continue
            try:
                spec = FieldSpec(
                    path=path,
                    type=ftype,
                    required=bool(f.get("required", False)),
                    minimum=_num(f.get("minimum")),
                    maximum=_num(f.get("maximum")),
                    min_length=f.get("minLength"),
                    max_length=f.get("maxLength"),
                    pattern=f.get("pattern"),
                    ref_table=f.get("table"),
                )
                for n in (spec.min_length, spec.max_length):
                    if n is not None and (not isinstance(n, int) or isinstance(n, bool) or n < 0):
                        raise ValueError("lengths must be non-negative integers")
                if spec.pattern is not None:
                    re.compile(spec.pattern)
                if spec.minimum is not None and spec.maximum is not None and Decimal(spec.minimum) > Decimal(spec.maximum):
                    raise ValueError("minimum exceeds maximum")
                if ftype == "reference" and not isinstance(spec.ref_table, str):
                    raise ValueError("reference field needs a 'table'")
            except (ValueError, re.error) as e:
                problems.append((path, str(e)))
                continue
            tables[tname].append(fname)
            fields[path] = spec
            if ftype == "reference":
                pending_refs.append((path, spec.ref_table))

    for path, target in pending_refs:
        if target not in tables:
            problems.append((path, f"dangling reference to table {target!r}"))

    acl: dict[tuple[str, str], frozenset[str]] = {}
    raw_acl = doc.get("default_acl", {})
    if not isinstance(raw_acl, dict):
        problems.append(("default_acl", "must be an object"))
        raw_acl = {}
    for path, modes in raw_acl.items():
        table, _, fname = path.partition(".")
        if table not in tables or not (fname == "*" or fname in tables[table]):
            problems.append((f"default_acl.{path}", "does not resolve to a schema field"))
            continue
        if not isinstance(modes, dict) or set(modes) - {"read", "write"}:
            problems.append((f"default_acl.{path}", "expected {'read': [...], 'write': [...]}"))
            continue
        for mode, principals in modes.items():
            if (not isinstance(principals, list) or not principals
                    or not all(isinstance(p, str) and p for p in principals)):
                problems.append((f"default_acl.{path}.{mode}", "principal list must be non-empty strings"))
                continue
            acl[(path, mode)] = frozenset(principals)

    if problems:
        raise SchemaError(problems)
    document = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return CompiledChainSpec(fields, acl, document, hash_content(_registry_bytes(fields, acl)), tables)


def additive_violations(old: CompiledChainSpec, new: CompiledChainSpec) -> list[Violation]:
    """Schema evolution may only add tables and fields."""
    out = []
    for path, spec in old.fields.items():
        if new.fields.get(path) != spec:
            out.append(Violation(path, "field removed or changed"))
    for key, principals in old.default_acl.items():
        if new.default_acl.get(key) != principals:
            out.append(Violation(f"default_acl.{key[0]}.{key[1]}", "default ACL removed or changed"))
    return out


def decode_value(raw: bytes) -> Any:
    return json.loads(raw.decode("utf-8"))


def encode_value(value: Any) -> bytes:
    return json.dumps(value, separators=(",", ":"), sort_keys=True).encode()


def _check_value(spec: FieldSpec, value: Any) -> str | None:
    t = spec.type
    if t == "string" or t == "reference":
        if not isinstance(value, str):
            return f"type mismatch: expected {t}, got {type(value).__name__}"
        if t == "reference" and not value:
            return "empty reference"
        n = len(value)
    elif t == "bytes":
        if not isinstance(value, str) or not _HEX_RE.match(value):
            return "type mismatch: expected lowercase hex bytes"
        n = len(value) // 2
    elif t == "integer":
        if isinstance(value, bool) or not isinstance(value, int):
            return f"type mismatch: expected integer, got {type(value).__name__}"
        n = None
    elif t == "decimal":
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            return f"type mismatch: expected decimal, got {type(value).__name__}"
        try:
            value = Decimal(str(value))
        except InvalidOperation:
            return "type mismatch: not a decimal"
        if not value.is_finite():
            return "decimal must be finite"
        n = None
    elif t == "boolean":
        if not isinstance(value, bool):
            return f"type mismatch: expected boolean, got {type(value).__name__}"
        return None
    else:
        return f"unsupported type {t}"

    if t in ("integer", "decimal"):
        if spec.minimum is not None and Decimal(value) < Decimal(spec.minimum):
            return f"value {value} below minimum {spec.minimum}"
        if spec.maximum is not None and Decimal(value) > Decimal(spec.maximum):
            return f"value {value} above maximum {spec.maximum}"
    else:
        if spec.min_length is not None and n < spec.min_length:
            return f"length {n} below minLength {spec.min_length}"
        if spec.max_length is not None and n > spec.max_length:
            return f"length {n} above maxLength {spec.max_length}"
        if spec.pattern is not None and not re.search(spec.pattern, value):
            return f"does not match pattern {spec.pattern!r}"
    return None


def validate_payload(spec: CompiledChainSpec, tx: Transaction,
                     row_exists: Callable[[str, str], bool] | None = None) -> list[Violation]:
    """Check every write of ``tx`` against the compiled schema.

    Returns an empty list when the payload is valid. When ``row_exists`` is
    supplied, rows it reports as new must have all required fields written.
    """
    violations: list[Violation] = []
    touched: dict[tuple[str, str], set[str]] = {}
    for key, raw in tx.writes:
        try:
            table, row, fname = parse_data_key(key)
        except ValueError:
            violations.append(Violation(key, "malformed key (expected table/row/field)"))
            continue
        path = f"{table}.{fname}"
        fs = spec.fields.get(path)
        if fs is None:
            violations.append(Violation(path, "unknown field"))
            continue
        try:
            value = decode_value(raw)
        except (UnicodeDecodeError, json.JSONDecodeError):
            violations.append(Violation(path, "value is not valid JSON"))
            continue
        problem = _check_value(fs, value)
        if problem:
            violations.append(Violation(path, problem))
        touched.setdefault((table, row), set()).add(fname)
    for key, _ in tx.reads:
        if not key.startswith("_"):
            try:
                table, _, fname = parse_data_key(key)
            except ValueError:
                violations.append(Violation(key, "malformed read key"))
                continue
            if f"{table}.{fname}" not in spec.fields:
                violations.append(Violation(f"{table}.{fname}", "unknown field in read-set"))
    if row_exists is not None:
        for (table, row), written in sorted(touched.items()):
            if not row_exists(table, row):
                missing = [f for f in spec.required_fields(table) if f not in written]
                for f in missing:
                    violations.append(Violation(f"{table}.{f}", f"required field missing when creating row {row!r}"))
    return violations


def is_public(principals: frozenset[str]) -> bool:
    return PUBLIC in principals
