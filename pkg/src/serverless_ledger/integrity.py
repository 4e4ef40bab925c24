"""Offline audit of exported ledgers.

Nothing here needs a live network: chain verification, certificate checks,
code-agreement checks and world-state reconstruction all run from the
exported bytes plus, for code agreements, the blob stores being audited.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .consensus import verify_block_standalone
from .ledger_model import (
    ZERO_DIGEST,
    Block,
    ChainConfig,
    CodeAgreement,
    DecodeError,
    SoftwareUpdate,
    canonical_encode,
    decode,
)
from .quorum import AgreementReport, VotePolicy, check_certificate
from .state import apply_entry, state_digest
from .substrate import BlobStore, KVStore


@dataclass
class ChainCheck:
    ok: bool
    first_invalid: int | None = None
    reason: str = ""
    checked: int = 0

    def __bool__(self) -> bool:
        return self.ok


# ---------------------------------------------------------------------------
# export format: u32 length + canonical bytes, config record first


def export_ledger(config: ChainConfig, blocks: Iterable[Block | bytes]) -> bytes:
    out = bytearray()
    for rec in [canonical_encode(config)] + [b if isinstance(b, bytes) else canonical_encode(b) for b in blocks]:
        out += struct.pack(">I", len(rec))
        out += rec
    return bytes(out)


@dataclass
class LoadedLedger:
    config: ChainConfig | None
    blocks: list[Block]
    error: ChainCheck | None = None


def _record_height(index: int) -> int:
    # record 0 is the chain config and is attributed to genesis
    return max(index - 1, 0)


def load_ledger(data: bytes) -> LoadedLedger:
    """Parse as far as possible; the first bad record becomes ``error`` at its height.

    Each record is decoded as soon as it is framed. A damaged length prefix
    therefore shows up as a decode failure of that same record (trailing or
    missing bytes) rather than of a later one.
    """
    config, blocks = None, []
    pos = 0
    idx = 0
    while pos < len(data) or idx == 0:
        where = _record_height(idx)
        if pos + 4 > len(data):
            reason = "empty ledger file" if not data else "truncated length prefix"
            return LoadedLedger(config, blocks, ChainCheck(False, where, reason))
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        if n == 0 or pos + 4 + n > len(data):
            return LoadedLedger(config, blocks, ChainCheck(False, where, "record length exceeds file"))
        rec = data[pos + 4:pos + 4 + n]
        pos += 4 + n
        try:
            obj = decode(rec)
        except DecodeError as err:
            what = "config" if idx == 0 else "block"
            return LoadedLedger(config, blocks, ChainCheck(False, where, f"undecodable {what}: {err}"))
        if idx == 0:
            if not isinstance(obj, ChainConfig):
                return LoadedLedger(None, [], ChainCheck(False, 0, "first record is not a chain config"))
            config = obj
        else:
            if not isinstance(obj, Block):
                return LoadedLedger(config, blocks, ChainCheck(False, where, "record is not a block"))
            blocks.append(obj)
        idx += 1
    return LoadedLedger(config, blocks)


# ---------------------------------------------------------------------------
# checks


def chain_verify(ledger: list[Block], config: ChainConfig, policy: VotePolicy | None = None) -> ChainCheck:
    """Verify linkage, hashes, schedules and certificates; report the first bad height."""
    if not ledger:
        return ChainCheck(False, 0, "empty ledger")
    policy = policy or VotePolicy.of(config)
    prev = ZERO_DIGEST
    for i, block in enumerate(ledger):
        if block.height != i:
            return ChainCheck(False, i, f"expected height {i}, found {block.height}", i)
        problem = verify_block_standalone(block, prev, config, policy)
        if problem:
            return ChainCheck(False, i, problem, i)
        if i == 0 and (block.status != "committed"
                       or sorted(block.certificate.yes_voters()) != sorted(config.node_ids)):
            return ChainCheck(False, 0, "genesis must be signed by every founding node", 0)
        prev = block.content_hash
    return ChainCheck(True, None, "", len(ledger))


def verify_agreement(block: Block, policy: VotePolicy, config: ChainConfig) -> AgreementReport:
    """Offline proof-of-agreement check of one block under ``policy``."""
    return check_certificate(block.certificate, block.block_id, block.content_hash, config, policy)


def verify_ledger_bytes(data: bytes, policy: VotePolicy | None = None) -> ChainCheck:
    loaded = load_ledger(data)
    if loaded.config is None:
        return loaded.error
    if loaded.blocks:
        g = loaded.blocks[0]
        if g.config_digest != loaded.config.digest:
            return ChainCheck(False, 0, "config record does not match genesis")
    check = chain_verify(loaded.blocks, loaded.config, policy) if loaded.blocks else ChainCheck(False, 0, "no blocks")
    if loaded.error is not None:
        if check.ok or check.first_invalid >= loaded.error.first_invalid:
            return loaded.error
    return check


def replay(ledger: list[Block], height: int | None = None) -> KVStore:
    """Sequential replay of committed entries (schedules ignored) on a fresh store."""
    store = KVStore("audit")
    for block in ledger:
        if height is not None and block.height > height:
            break
        if block.status != "committed":
            continue
        for entry in block.entries:
            apply_entry(store, entry)
    return store


def audit_state_at(ledger: list[Block], height: int, config: ChainConfig | None = None) -> tuple[dict, bytes]:
    if not 0 <= height < len(ledger):
        raise ValueError(f"height {height} outside ledger of {len(ledger)} blocks")
    if config is not None:
        check = chain_verify(ledger[:height + 1], config)
        if not check.ok:
            raise ValueError(f"chain invalid at height {check.first_invalid}: {check.reason}")
    store = replay(ledger, height)
    return store.snapshot(), state_digest(store)


@dataclass
class CodeMismatch:
    height: int
    entry_id: str
    name: str
    blob_key: str
    store: str
    problem: str


@dataclass
class CodeAuditResult:
    ok: bool
    checked: int
    mismatches: list[CodeMismatch] = field(default_factory=list)


def verify_code_agreements(ledger: list[Block], blob_stores: Mapping[str, BlobStore] | Iterable[BlobStore]) -> CodeAuditResult:
    stores = list(blob_stores.values()) if isinstance(blob_stores, Mapping) else list(blob_stores)
    res = CodeAuditResult(True, 0)
    for block in ledger:
        if block.status != "committed":
            continue
        for entry in block.entries:
            body = entry.body
            if isinstance(body, CodeAgreement):
                refs = body.refs
            elif isinstance(body, SoftwareUpdate):
                refs = (body.ref,)
            else:
                continue
            for ref in refs:
                res.checked += 1
                for store in stores:
                    blob = store.get(ref.blob_key)
                    problem = None
                    if blob is None:
                        problem = "missing blob"
                    elif not blob.embargoed:
                        problem = "blob not embargoed"
                    elif blob.digest != ref.digest or blob.digest != _sha(blob.data):
                        problem = "digest mismatch"
                    if problem:
                        res.mismatches.append(CodeMismatch(block.height, entry.entry_id, ref.name,
                                                           ref.blob_key, store.owner, problem))
    res.ok = not res.mismatches
    return res


def _sha(data: bytes) -> bytes:
    from .ledger_model import hash_content

    return hash_content(data)


# ---------------------------------------------------------------------------
# report


@dataclass
class AuditReport:
    ok: bool
    lines: list[str]
    first_invalid: int | None = None
    state_digest: bytes | None = None

    def text(self) -> str:
        return "".join(l + "\n" for l in self.lines)


def audit_bytes(data: bytes) -> AuditReport:
    """Full standalone audit: chain, every certificate, and head state digest."""
    lines = []
    check = verify_ledger_bytes(data)
    loaded = load_ledger(data)
    if not check.ok:
        lines.append(f"{check.first_invalid}|chain_verify|FAIL {check.reason}")
        return AuditReport(False, lines, check.first_invalid)
    config, blocks = loaded.config, loaded.blocks
    policy = VotePolicy.of(config)
    lines.append(f"{len(blocks) - 1}|chain_verify|ok")
    ok = True
    for b in blocks:
        rep = check_certificate(b.certificate, b.block_id, b.content_hash, config, policy,
                                require_quorum=b.status == "committed")
        good = rep.ok and (b.status == "committed") == rep.meets_threshold
        ok &= good
        lines.append(f"{b.height}|agreement|{'ok' if good else 'FAIL'} {b.status} "
                     f"yes={len(rep.valid_yes)}/{rep.threshold}")
    _, digest = audit_state_at(blocks, len(blocks) - 1)
    lines.append(f"{len(blocks) - 1}|state_digest|{digest.hex()}")
    return AuditReport(ok, lines, None, digest)
