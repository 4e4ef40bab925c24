"""Chain data types, canonical encoding, hashing and signatures.

The canonical encoding is a small tagged, length-prefixed binary format.
Entities are dataclasses encoded as their type name followed by their
fields in declaration order; integers are 8-byte big-endian two's
complement. ``decode`` is strict: it rejects trailing bytes, unknown type
names and anything that would not re-encode to the same bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

ZERO_DIGEST = bytes(32)
DEFAULT_MAX_BLOCK_SIZE = 900

ENTRY_KINDS = ("transaction", "acl_update", "schema_evolution", "code_agreement", "software_update")
GROUP_MODES = ("none", "ordered", "unordered")
VERDICTS = ("yes", "no")
BLOCK_STATUSES = ("pending", "committed", "aborted")
POLICY_MODES = ("all", "majority", "bft_majority")
LEADER_MODES = ("rotating", "dedicated")
ACL_MODES = ("read", "write")


class DecodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# canonical encoding

_NONE, _FALSE, _TRUE, _INT, _BYTES, _STR, _SEQ, _ENTITY = 0x01, 0x02, 0x03, 0x10, 0x20, 0x21, 0x30, 0x40

_ENTITIES: dict[str, type] = {}


def entity(cls):
    """Register a frozen dataclass as a canonically encodable entity."""
    _ENTITIES[cls.__name__] = cls
    return cls


def _enc(obj: Any, out: bytearray) -> None:
    if obj is None:
        out.append(_NONE)
    elif obj is True:
        out.append(_TRUE)
    elif obj is False:
        out.append(_FALSE)
    elif isinstance(obj, int):
        out.append(_INT)
        out += struct.pack(">q", obj)
    elif isinstance(obj, (bytes, bytearray)):
        out.append(_BYTES)
        out += struct.pack(">I", len(obj))
        out += obj
    elif isinstance(obj, str):
        b = obj.encode("utf-8")
        out.append(_STR)
        out += struct.pack(">I", len(b))
        out += b
    elif isinstance(obj, (tuple, list)):
        out.append(_SEQ)
        out += struct.pack(">I", len(obj))
        for item in obj:
            _enc(item, out)
    elif type(obj).__name__ in _ENTITIES and dataclasses.is_dataclass(obj):
        cached = obj.__dict__.get("_canonical")
        if cached is None:
            sub = bytearray()
            name = type(obj).__name__.encode("ascii")
            names = _field_names(type(obj))
            sub.append(_ENTITY)
            sub += struct.pack(">H", len(name))
            sub += name
            sub += struct.pack(">H", len(names))
            for n in names:
                _enc(getattr(obj, n), sub)
            cached = bytes(sub)
            # entities are frozen, so their encoding can be memoized on the instance
            object.__setattr__(obj, "_canonical", cached)
        out += cached
    else:
        raise TypeError(f"cannot canonically encode {type(obj).__name__}")


def _signing_bytes(obj: Any) -> bytes:
    cached = obj.__dict__.get("_signing")
    if cached is None:
        cached = canonical_encode(dataclasses.replace(obj, signature=b""))
        object.__setattr__(obj, "_signing", cached)
    return cached


@lru_cache(maxsize=None)
def _field_names(cls: type) -> tuple[str, ...]:
    return tuple(f.name for f in dataclasses.fields(cls))


def canonical_encode(obj: Any) -> bytes:
    out = bytearray()
    _enc(obj, out)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError(f"truncated input at offset {self.pos}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def value(self, depth: int = 0) -> Any:
        if depth > 64:
            raise DecodeError("nesting too deep")
        tag = self.take(1)[0]
        if tag == _NONE:
            return None
        if tag == _TRUE:
            return True
        if tag == _FALSE:
            return False
        if tag == _INT:
            return struct.unpack(">q", self.take(8))[0]
        if tag == _BYTES:
            (n,) = struct.unpack(">I", self.take(4))
            return self.take(n)
        if tag == _STR:
            (n,) = struct.unpack(">I", self.take(4))
            try:
                return self.take(n).decode("utf-8")
            except UnicodeDecodeError as e:
                raise DecodeError(str(e)) from None
        if tag == _SEQ:
            (n,) = struct.unpack(">I", self.take(4))
            if n > len(self.data) - self.pos:
                raise DecodeError("sequence length exceeds input")
            return tuple(self.value(depth + 1) for _ in range(n))
        if tag == _ENTITY:
            (n,) = struct.unpack(">H", self.take(2))
            try:
                name = self.take(n).decode("ascii")
            except UnicodeDecodeError:
                raise DecodeError("bad entity name") from None
            cls = _ENTITIES.get(name)
            if cls is None:
                raise DecodeError(f"unknown entity {name!r}")
            (nf,) = struct.unpack(">H", self.take(2))
            fields = dataclasses.fields(cls)
            if nf != len(fields):
                raise DecodeError(f"{name}: expected {len(fields)} fields, got {nf}")
            values = [self.value(depth + 1) for _ in fields]
            try:
                return cls(*values)
            except (TypeError, ValueError) as e:
                raise DecodeError(f"{name}: {e}") from None
        raise DecodeError(f"unknown tag 0x{tag:02x} at offset {self.pos - 1}")


def decode(data: bytes) -> Any:
    r = _Reader(bytes(data))
    obj = r.value()
    if r.pos != len(r.data):
        raise DecodeError(f"{len(r.data) - r.pos} trailing bytes")
    # Rejects non-canonical inputs such as a bool where a field wants an int.
    if canonical_encode(obj) != r.data:
        raise DecodeError("input is not in canonical form")
    return obj


def hash_content(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _is_bytes(x: Any) -> bool:
    return isinstance(x, (bytes, bytearray))


# ---------------------------------------------------------------------------
# keys and signatures


class UnknownPrincipal(KeyError):
    pass


@lru_cache(maxsize=1 << 16)
def _load_public(public_key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_key)


@lru_cache(maxsize=1 << 18)
def verify_with_key(public_key: bytes, message: bytes, signature: bytes) -> bool:
    # Cached: verification is a pure function of its three inputs.
    try:
        _load_public(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


class Keyring:
    """Deterministic Ed25519 key pairs, one per principal.

    Private keys are derived from the scenario seed so that a run is
    reproducible; in a deployment each party would hold only its own.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._private: dict[str, Ed25519PrivateKey] = {}
        self.public: dict[str, bytes] = {}

    def register(self, principal: str) -> bytes:
        if principal not in self._private:
            raw = hashlib.sha256(b"keyring|" + self.seed.to_bytes(8, "big") + principal.encode()).digest()
            key = Ed25519PrivateKey.from_private_bytes(raw)
            self._private[principal] = key
            self.public[principal] = key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return self.public[principal]

    def sign(self, principal: str, message: bytes) -> bytes:
        try:
            return self._private[principal].sign(message)
        except KeyError:
            raise UnknownPrincipal(principal) from None

    def verify(self, principal: str, message: bytes, signature: bytes) -> bool:
        try:
            pk = self.public[principal]
        except KeyError:
            raise UnknownPrincipal(principal) from None
        return verify_with_key(pk, message, signature)


def sign(keyring: Keyring, principal: str, message: bytes) -> bytes:
    return keyring.sign(principal, message)


def verify(keyring: Keyring, principal: str, message: bytes, signature: bytes) -> bool:
    return keyring.verify(principal, message, signature)


# ---------------------------------------------------------------------------
# ledger entities


@entity
@dataclass(frozen=True)
class Transaction:
    """Signed batch of field writes.

    ``writes`` are (state key, JSON value bytes); ``reads`` are (state key,
    expected version) with version 0 meaning "absent".
    """

    tx_id: str
    submitter: str
    writes: tuple
    reads: tuple = ()
    group_id: str = ""
    group_mode: str = "none"
    group_size: int = 1
    latency_bound_ms: int | None = None
    schema_digest: bytes = ZERO_DIGEST
    submitted_at: int = 0
    signature: bytes = b""

    def __post_init__(self):
        _check(isinstance(self.tx_id, str) and self.tx_id != "", "tx_id must be a non-empty string")
        _check(isinstance(self.submitter, str), "submitter must be a string")
        _check(isinstance(self.writes, tuple) and len(self.writes) > 0, "writes must be non-empty")
        for w in self.writes:
            _check(isinstance(w, tuple) and len(w) == 2 and isinstance(w[0], str) and _is_bytes(w[1]),
                   "each write is (key, bytes)")
        _check(isinstance(self.reads, tuple), "reads must be a tuple")
        for r in self.reads:
            _check(isinstance(r, tuple) and len(r) == 2 and isinstance(r[0], str)
                   and isinstance(r[1], int) and not isinstance(r[1], bool) and r[1] >= 0,
                   "each read is (key, version >= 0)")
        _check(self.group_mode in GROUP_MODES, f"bad group mode {self.group_mode!r}")
        _check(isinstance(self.group_size, int) and self.group_size >= 1, "group_size must be >= 1")
        _check((self.group_mode == "none") == (self.group_id == ""), "group id and mode must agree")
        _check(self.latency_bound_ms is None or self.latency_bound_ms > 0, "latency bound must be positive")
        _check(_is_bytes(self.schema_digest) and _is_bytes(self.signature), "digests are bytes")

    @property
    def entry_id(self) -> str:
        return self.tx_id

    def signing_bytes(self) -> bytes:
        return _signing_bytes(self)

    @property
    def content_digest(self) -> bytes:
        return hash_content(self.signing_bytes())


@entity
@dataclass(frozen=True)
class ACLUpdate:
    update_id: str
    submitter: str
    path: str
    mode: str
    principals: tuple
    submitted_at: int = 0
    signature: bytes = b""

    def __post_init__(self):
        _check(self.mode in ACL_MODES, f"bad ACL mode {self.mode!r}")
        _check(isinstance(self.principals, tuple) and len(self.principals) > 0,
               "ACL principal set must be non-empty (use '*' for public)")
        _check(all(isinstance(p, str) for p in self.principals), "principals are strings")
        _check(list(self.principals) == sorted(set(self.principals)), "principals must be sorted and unique")

    @property
    def entry_id(self) -> str:
        return self.update_id

    def signing_bytes(self) -> bytes:
        return _signing_bytes(self)


@entity
@dataclass(frozen=True)
class SchemaEvolution:
    evolution_id: str
    submitter: str
    document: bytes
    digest: bytes
    signature: bytes = b""

    @property
    def entry_id(self) -> str:
        return self.evolution_id

    def signing_bytes(self) -> bytes:
        return _signing_bytes(self)


@entity
@dataclass(frozen=True)
class CodeRef:
    name: str
    version: int
    digest: bytes
    blob_key: str


@entity
@dataclass(frozen=True)
class CodeAgreement:
    agreement_id: str
    submitter: str
    refs: tuple
    signature: bytes = b""

    def __post_init__(self):
        _check(all(isinstance(r, CodeRef) for r in self.refs), "refs must be CodeRef")

    @property
    def entry_id(self) -> str:
        return self.agreement_id

    def signing_bytes(self) -> bytes:
        return _signing_bytes(self)


@entity
@dataclass(frozen=True)
class SoftwareUpdate:
    update_id: str
    submitter: str
    ref: CodeRef
    signature: bytes = b""

    def __post_init__(self):
        _check(isinstance(self.ref, CodeRef), "ref must be CodeRef")

    @property
    def entry_id(self) -> str:
        return self.update_id

    def signing_bytes(self) -> bytes:
        return _signing_bytes(self)


_BODY_KIND = {
    Transaction: "transaction",
    ACLUpdate: "acl_update",
    SchemaEvolution: "schema_evolution",
    CodeAgreement: "code_agreement",
    SoftwareUpdate: "software_update",
}


@entity
@dataclass(frozen=True)
class LedgerEntry:
    kind: str
    body: Any

    def __post_init__(self):
        _check(self.kind in ENTRY_KINDS, f"bad entry kind {self.kind!r}")
        _check(_BODY_KIND.get(type(self.body)) == self.kind, f"body does not match kind {self.kind}")

    @classmethod
    def wrap(cls, body: Any) -> "LedgerEntry":
        return cls(_BODY_KIND[type(body)], body)

    @property
    def entry_id(self) -> str:
        return self.body.entry_id

    @property
    def submitter(self) -> str:
        return self.body.submitter


@entity
@dataclass(frozen=True)
class Vote:
    node_id: str
    verdict: str
    signature: bytes

    def __post_init__(self):
        _check(self.verdict in VERDICTS, f"bad verdict {self.verdict!r}")


def vote_message(block_id: str, block_hash: bytes, verdict: str) -> bytes:
    return canonical_encode(("vote", block_id, block_hash, verdict))


@entity
@dataclass(frozen=True)
class VoteCertificate:
    block_id: str
    block_hash: bytes
    votes: tuple = ()

    def __post_init__(self):
        _check(all(isinstance(v, Vote) for v in self.votes), "votes must be Vote")

    def yes_voters(self) -> list[str]:
        return [v.node_id for v in self.votes if v.verdict == "yes"]


@entity
@dataclass(frozen=True)
class Principal:
    principal_id: str
    public_key: bytes


@entity
@dataclass(frozen=True)
class ChainConfig:
    chain_id: str
    nodes: tuple
    principals: tuple = ()
    policy: str = "majority"
    max_block_size: int = DEFAULT_MAX_BLOCK_SIZE
    leader_mode: str = "rotating"
    dedicated_leader: str = ""
    default_latency_bound_ms: int = 100
    orchestrator_digest: bytes = ZERO_DIGEST

    def __post_init__(self):
        _check(isinstance(self.nodes, tuple) and len(self.nodes) >= 1, "config needs at least one node")
        _check(all(isinstance(p, Principal) for p in self.nodes + self.principals), "nodes/principals are Principal")
        ids = [p.principal_id for p in self.nodes + self.principals]
        _check(len(ids) == len(set(ids)), "duplicate principal id")
        _check(self.policy in POLICY_MODES, f"bad policy {self.policy!r}")
        _check(isinstance(self.max_block_size, int) and self.max_block_size >= 1, "max_block_size must be >= 1")
        _check(self.leader_mode in LEADER_MODES, f"bad leader mode {self.leader_mode!r}")
        _check(self.leader_mode != "dedicated" or self.dedicated_leader != "",
               "dedicated leader mode needs a leader id")
        _check(self.default_latency_bound_ms > 0, "default latency bound must be positive")

    @property
    def node_ids(self) -> list[str]:
        return [p.principal_id for p in self.nodes]

    def public_key(self, principal: str) -> bytes | None:
        for p in self.nodes + self.principals:
            if p.principal_id == principal:
                return p.public_key
        return None

    def key_map(self) -> dict[str, bytes]:
        return {p.principal_id: p.public_key for p in self.nodes + self.principals}

    @property
    def digest(self) -> bytes:
        return hash_content(canonical_encode(self))


@entity
@dataclass(frozen=True)
class Block:
    height: int
    block_id: str
    timestamp: int
    leader: str
    orchestration_digest: bytes
    config_digest: bytes
    prev_hash: bytes
    entries: tuple
    schedule: tuple
    content_hash: bytes = b""
    status: str = "pending"
    certificate: VoteCertificate | None = None

    def __post_init__(self):
        _check(isinstance(self.height, int) and self.height >= 0, "height must be >= 0")
        _check(self.status in BLOCK_STATUSES, f"bad status {self.status!r}")
        _check(all(isinstance(e, LedgerEntry) for e in self.entries), "entries must be LedgerEntry")
        _check(isinstance(self.schedule, tuple) and all(isinstance(l, tuple) for l in self.schedule),
               "schedule is a tuple of lanes")
        _check(self.certificate is None or isinstance(self.certificate, VoteCertificate), "bad certificate")

    def content_bytes(self) -> bytes:
        return canonical_encode((
            "block", self.height, self.block_id, self.timestamp, self.leader,
            self.orchestration_digest, self.config_digest, self.prev_hash,
            self.entries, self.schedule,
        ))

    def compute_hash(self) -> bytes:
        return hash_content(self.content_bytes())

    def sealed(self) -> "Block":
        return dataclasses.replace(self, content_hash=self.compute_hash())

    def with_status(self, status: str, certificate: VoteCertificate | None = None) -> "Block":
        return dataclasses.replace(self, status=status,
                                   certificate=certificate if certificate is not None else self.certificate)


def schedule_is_partition(schedule: tuple, n_entries: int) -> bool:
    seen = [i for lane in schedule for i in lane]
    return sorted(seen) == list(range(n_entries)) and all(len(lane) > 0 for lane in schedule)


def make_vote(keyring: Keyring, node_id: str, block: Block, verdict: str) -> Vote:
    return Vote(node_id, verdict, keyring.sign(node_id, vote_message(block.block_id, block.content_hash, verdict)))


def sign_body(keyring: Keyring, body: Any) -> Any:
    return dataclasses.replace(body, signature=keyring.sign(body.submitter, body.signing_bytes()))


def make_genesis(config: ChainConfig, schema_document: bytes, schema_digest: bytes,
                 code_refs: Iterable[CodeRef], keyring: Keyring, timestamp: int = 0) -> Block:
    """Height-0 block: initial schema and consensus code agreements, signed by every founding node."""
    if not isinstance(config, ChainConfig):
        raise ValueError("invalid config")
    entries = (
        LedgerEntry.wrap(SchemaEvolution("genesis-schema", "genesis", schema_document, schema_digest)),
        LedgerEntry.wrap(CodeAgreement("genesis-code", "genesis", tuple(code_refs))),
    )
    block = Block(
        height=0, block_id="b00000000.0", timestamp=timestamp, leader=config.node_ids[0],
        orchestration_digest=config.orchestrator_digest, config_digest=config.digest,
        prev_hash=ZERO_DIGEST, entries=entries, schedule=((0,), (1,)),
    ).sealed()
    votes = tuple(make_vote(keyring, n, block, "yes") for n in config.node_ids)
    return block.with_status("committed", VoteCertificate(block.block_id, block.content_hash, votes))


def block_id_for(height: int, attempt: int) -> str:
    return f"b{height:08d}.{attempt}"
