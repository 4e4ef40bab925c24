"""Two-phase block commit over the simulated substrate.

Lifecycle: the gateway verifies and enqueues signed entries; the
orchestrator (leader) drains the queue into a block with a conflict-free
lane schedule; every node verifies the block against its own world state,
stages it durably and returns a signed vote; once the policy threshold of
yes-votes is reached the certificate is shipped with the apply message and
each node checks it independently before touching state.
"""
from __future__ import annotations

import random
from collections import OrderedDict
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .access_control import ACLState, authorize_acl_update, unauthorized_writes
from .ledger_model import (
    ACLUpdate,
    Block,
    ChainConfig,
    CodeAgreement,
    LedgerEntry,
    SchemaEvolution,
    SoftwareUpdate,
    Transaction,
    Vote,
    VoteCertificate,
    block_id_for,
    canonical_encode,
    decode,
    schedule_is_partition,
    verify_with_key,
    vote_message,
)
from .quorum import VotePolicy, check_certificate
from .schema import CompiledChainSpec, SchemaError, additive_violations, compile_schema, validate_payload
from .state import SCHEMA_DOC_KEY, SCHEMA_KEY, data_key, entry_reads, entry_writes
from .substrate import US_PER_MS, CrashFault, KVStore, derive_seed

MAX_REMINTS = 3
ORCHESTRATION_TRANSITIONS = 4


class ConsensusError(Exception):
    pass


class StaleHead(ConsensusError):
    pass


class InvalidCertificate(ConsensusError):
    pass


class BadSignature(ConsensusError):
    pass


class MalformedPayload(ConsensusError):
    pass


class ChainVerificationFailure(ConsensusError):
    def __init__(self, height: int, reason: str):
        super().__init__(f"height {height}: {reason}")
        self.height = height
        self.reason = reason


# ---------------------------------------------------------------------------
# pure helpers


def rotate_leader(config: ChainConfig, height: int) -> str:
    if config.leader_mode == "dedicated":
        return config.dedicated_leader
    ids = config.node_ids
    return ids[height % len(ids)]


def partition_conflicts(entries: Sequence[LedgerEntry]) -> tuple[tuple[int, ...], ...]:
    """Group entries into lanes that can be applied independently.

    Entries share a lane when their footprints conflict (write/write or
    write/read on a key) or they belong to the same ordered atomic group,
    closed transitively. Lanes keep queue order and are listed by their
    first entry.
    """
    n = len(entries)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            if ri < rj:
                parent[rj] = ri
            else:
                parent[ri] = rj

    writers: dict[str, list[int]] = {}
    readers: dict[str, list[int]] = {}
    group_head: dict[str, int] = {}
    for i, e in enumerate(entries):
        for k, _ in entry_writes(e):
            writers.setdefault(k, []).append(i)
        for k in entry_reads(e):
            readers.setdefault(k, []).append(i)
        body = e.body
        if isinstance(body, Transaction) and body.group_mode == "ordered":
            if body.group_id in group_head:
                union(i, group_head[body.group_id])
            else:
                group_head[body.group_id] = i
    for k, ws in writers.items():
        for j in ws[1:]:
            union(ws[0], j)
        for r in readers.get(k, ()):
            union(ws[0], r)
    lanes: dict[int, list[int]] = {}
    for i in range(n):
        lanes.setdefault(find(i), []).append(i)
    return tuple(tuple(lane) for _, lane in sorted(lanes.items(), key=lambda kv: kv[1][0]))


def _lane_writes(entries: Sequence[LedgerEntry], lane: Sequence[int]) -> list[tuple[str, bytes]]:
    out = []
    for i in lane:
        out.extend(entry_writes(entries[i]))
    return out


def apply_lanes(store: KVStore, entries: Sequence[LedgerEntry], schedule: Sequence[Sequence[int]],
                order: Sequence[int] | None = None, executor: Executor | None = None) -> None:
    """Apply ``entries`` lane by lane.

    Lane write-lists are prepared independently (optionally on ``executor``)
    and committed in ``order``; each lane tracks its own expected versions so
    a cross-lane key collision surfaces as a VersionConflict.
    """
    if executor is not None:
        prepared = list(executor.map(lambda lane: _lane_writes(entries, lane), schedule))
    else:
        prepared = [_lane_writes(entries, lane) for lane in schedule]
    base = {}
    for writes in prepared:
        for k, _ in writes:
            if k not in base:
                base[k] = store.version(k)
    for li in (order if order is not None else range(len(schedule))):
        expected: dict[str, int] = {}
        for k, v in prepared[li]:
            ver = expected.get(k, base[k])
            expected[k] = store.write_conditional(k, v, ver)


# ---------------------------------------------------------------------------
# protocol messages


@dataclass(frozen=True)
class BlockProposal:
    block: Block
    orchestration_digest: bytes


@dataclass(frozen=True)
class VoteMessage:
    node_id: str
    block_id: str
    block_hash: bytes
    verdict: str
    signature: bytes
    rejected: tuple[str, ...] = ()
    reason: str = ""

    @property
    def vote(self) -> Vote:
        return Vote(self.node_id, self.verdict, self.signature)


@dataclass
class Receipt:
    receipt_id: str
    entry_id: str
    enqueue_time: int


# ---------------------------------------------------------------------------
# node


class Node:
    """Protocol state of one participant, bound to its own NodeAccount."""

    def __init__(self, account, config: ChainConfig, keyring, lane_seed: int = 0):
        self.account = account
        self.node_id = account.node_id
        self.config = config
        self.keyring = keyring
        self.policy = VotePolicy.of(config)
        self.status = "active"
        self.chain: list[Block] = []
        self.pending: dict[str, Block] = {}
        self.committed_ids: set[str] = set()
        self.refusals: list[str] = []
        self.executor: Executor | None = None
        self._specs: dict[bytes, CompiledChainSpec] = {}
        self._keys = config.key_map()
        self._lane_rng = random.Random(derive_seed(lane_seed, f"lanes:{self.node_id}"))

    # -- views ---------------------------------------------------------------
    @property
    def state(self) -> KVStore:
        return self.account.state

    @property
    def height(self) -> int:
        return self.chain[-1].height if self.chain else -1

    @property
    def head_hash(self) -> bytes:
        return self.chain[-1].content_hash

    def current_spec(self) -> CompiledChainSpec:
        d = self.state.value(SCHEMA_KEY)
        if d not in self._specs:
            self._specs[d] = compile_schema(self.state.value(SCHEMA_DOC_KEY))
        return self._specs[d]

    def acl_state(self) -> ACLState:
        return ACLState.from_store(self.current_spec(), self.state)

    def stored_blocks(self) -> list[bytes]:
        return [self.account.ledger.value(k) for k in self.account.ledger.keys("block/")]

    # -- entry checks ----------------------------------------------------------
    def _signed_ok(self, body) -> bool:
        pk = self._keys.get(body.submitter)
        return pk is not None and verify_with_key(pk, body.signing_bytes(), body.signature)

    def _row_exists(self, spec: CompiledChainSpec, table: str, row: str) -> bool:
        return any(self.state.version(data_key(table, row, f)) > 0 for f in spec.tables.get(table, ()))

    def _code_ref_problem(self, ref) -> str | None:
        blob = self.account.blobs.get(ref.blob_key)
        if blob is None:
            return f"missing code blob {ref.blob_key}"
        if not blob.embargoed:
            return f"code blob {ref.blob_key} is not embargoed"
        if blob.digest != ref.digest:
            return f"code blob {ref.blob_key} digest mismatch"
        return None

    def check_entries(self, entries: Sequence[LedgerEntry]) -> dict[str, str]:
        """Entry ids that are invalid against this node's pre-block state, with reasons."""
        spec = self.current_spec()
        acl = ACLState.from_store(spec, self.state)
        members = set(self.config.node_ids)
        rejected: dict[str, str] = {}
        seen: set[str] = set()
        written: set[str] = set()
        groups: dict[str, list[Transaction]] = {}
        for e in entries:
            body = e.body
            eid = e.entry_id
            reason = None
            if eid in self.committed_ids or eid in seen:
                reason = "duplicate entry id"
            elif not self._signed_ok(body):
                reason = "bad submitter signature"
            elif isinstance(body, Transaction):
                if body.schema_digest != spec.digest:
                    reason = "validated under a stale schema digest"
                else:
                    problems = validate_payload(spec, body, lambda t, r: self._row_exists(spec, t, r))
                    if problems:
                        reason = "; ".join(map(str, problems))
                    else:
                        denied = unauthorized_writes(acl, body)
                        if denied:
                            reason = "write not authorized on " + ",".join(denied)
                        else:
                            for k, ver in body.reads:
                                if k in written or self.state.version(k) != ver:
                                    reason = f"stale read of {k}"
                                    break
                if body.group_mode != "none":
                    groups.setdefault(body.group_id, []).append(body)
            elif isinstance(body, ACLUpdate):
                reason = authorize_acl_update(acl, body)
            elif isinstance(body, SchemaEvolution):
                if body.submitter not in members:
                    reason = "schema evolution must come from a chain node"
                else:
                    try:
                        new = compile_schema(body.document)
                    except SchemaError as err:
                        reason = f"schema does not compile: {err}"
                    else:
                        if new.digest != body.digest:
                            reason = "schema digest mismatch"
                        else:
                            bad = additive_violations(spec, new)
                            if bad:
                                reason = "non-additive schema change: " + "; ".join(map(str, bad))
            elif isinstance(body, (CodeAgreement, SoftwareUpdate)):
                if body.submitter not in members:
                    reason = "code entries must come from a chain node"
                else:
                    refs = body.refs if isinstance(body, CodeAgreement) else (body.ref,)
                    for ref in refs:
                        reason = self._code_ref_problem(ref)
                        if reason:
                            break
            seen.add(eid)
            if reason:
                rejected[eid] = reason
            else:
                written.update(k for k, _ in entry_writes(e))
        for gid, members_ in groups.items():
            size = members_[0].group_size
            bad = (len(members_) != size or any(m.group_size != size or m.group_mode != members_[0].group_mode
                                                for m in members_)
                   or any(m.tx_id in rejected for m in members_))
            if bad:
                for m in members_:
                    rejected.setdefault(m.tx_id, f"atomic group {gid} incomplete or invalid")
        return rejected

    def block_problem(self, proposal: BlockProposal) -> str | None:
        b = proposal.block
        if b.orchestration_digest != self.config.orchestrator_digest or \
                proposal.orchestration_digest != self.config.orchestrator_digest:
            return "orchestration digest does not match the registered orchestrator"
        if b.compute_hash() != b.content_hash:
            return "content hash does not recompute"
        if b.config_digest != self.config.digest:
            return "config digest mismatch"
        if b.height != self.height + 1:
            return f"height {b.height} does not follow {self.height}"
        if not 1 <= len(b.entries) <= self.config.max_block_size:
            return "block size out of range"
        if b.schedule != partition_conflicts(b.entries):
            return "schedule is not the conflict partition of the entries"
        return None

    # -- phase handlers --------------------------------------------------------
    def handle_verify(self, proposal: BlockProposal, meter=None) -> VoteMessage:
        b = proposal.block
        if b.prev_hash != self.head_hash:
            self.status = "lagging"
            raise StaleHead(f"{self.node_id} head {self.height} does not match proposal parent")
        if meter is not None:
            meter.charge("function_invocation", len(b.entries))
        problem = self.block_problem(proposal)
        rejected: dict[str, str] = {}
        if problem is None:
            rejected = self.check_entries(b.entries)
        self.account.ledger.put(f"pending/{b.block_id}", canonical_encode(b))
        self.pending[b.block_id] = b
        verdict = "yes" if problem is None and not rejected else "no"
        sig = self.keyring.sign(self.node_id, vote_message(b.block_id, b.content_hash, verdict))
        reason = problem or "; ".join(f"{k}: {v}" for k, v in sorted(rejected.items()))
        return VoteMessage(self.node_id, b.block_id, b.content_hash, verdict, sig,
                           tuple(sorted(rejected)), reason)

    def handle_apply(self, block_id: str, certificate: VoteCertificate) -> str:
        block = self.pending.get(block_id)
        if block is None or block.content_hash != certificate.block_hash:
            self.refusals.append(block_id)
            raise InvalidCertificate(f"{self.node_id} holds no pending block matching {block_id}")
        rep = check_certificate(certificate, block.block_id, block.content_hash, self.config, self.policy)
        if not rep.ok:
            self.refusals.append(block_id)
            raise InvalidCertificate(f"{self.node_id}: {rep.describe()}")
        if block.prev_hash != self.head_hash:
            self.status = "lagging"
            raise StaleHead(f"{self.node_id} cannot apply {block_id}: head moved")
        self.commit(block.with_status("committed", certificate))
        return "ack"

    def handle_abort(self, block_id: str, certificate: VoteCertificate) -> str:
        block = self.pending.get(block_id)
        if block is None or block.content_hash != certificate.block_hash:
            raise InvalidCertificate(f"{self.node_id} holds no pending block matching {block_id}")
        rep = check_certificate(certificate, block.block_id, block.content_hash, self.config, self.policy,
                                require_quorum=False)
        if not rep.ok or rep.meets_threshold:
            raise InvalidCertificate(f"{self.node_id}: abort certificate is not a valid failed quorum")
        if block.prev_hash != self.head_hash:
            self.status = "lagging"
            raise StaleHead(f"{self.node_id} cannot record abort of {block_id}")
        self.commit(block.with_status("aborted", certificate))
        return "ack"

    def commit(self, block: Block) -> None:
        """Append a certified block; committed blocks also mutate world state."""
        if block.status == "committed":
            order = list(range(len(block.schedule)))
            self._lane_rng.shuffle(order)
            apply_lanes(self.state, block.entries, block.schedule, order, self.executor)
            self.committed_ids.update(e.entry_id for e in block.entries)
        self.chain.append(block)
        self.account.ledger.put(f"block/{block.height:012d}", canonical_encode(block))
        for bid in [bid for bid, b in self.pending.items() if b.height <= block.height]:
            del self.pending[bid]
            self.account.ledger.delete(f"pending/{bid}")

    def install_genesis(self, genesis: Block) -> None:
        if self.chain:
            raise ConsensusError("genesis already installed")
        for e in genesis.entries:
            for k, v in entry_writes(e):
                self.state.write_conditional(k, v, self.state.version(k))
            self.committed_ids.add(e.entry_id)
        self.chain.append(genesis)
        self.account.ledger.put(f"block/{0:012d}", canonical_encode(genesis))

    # -- resync ------------------------------------------------------------------
    def resync(self, source: Iterable[bytes | Block]) -> int:
        """Catch up from another ledger copy; returns the number of blocks applied.

        The missing suffix is verified in full (encoding, linkage, content
        hash, schedule, certificate) before anything is applied.
        """
        verified: list[Block] = []
        prev = self.head_hash
        expect = self.height + 1
        for item in source:
            if isinstance(item, Block):
                block = item
            else:
                try:
                    block = decode(item)
                except ValueError as err:
                    raise ChainVerificationFailure(expect, f"undecodable block: {err}") from None
                if not isinstance(block, Block):
                    raise ChainVerificationFailure(expect, "record is not a block")
            if block.height < expect:
                continue
            if block.height != expect:
                raise ChainVerificationFailure(expect, f"gap: got height {block.height}")
            problem = verify_block_standalone(block, prev, self.config, self.policy)
            if problem:
                raise ChainVerificationFailure(block.height, problem)
            verified.append(block)
            prev = block.content_hash
            expect += 1
        for block in verified:
            self.commit(block)
        self.status = "active"
        return len(verified)


def verify_block_standalone(block: Block, prev_hash: bytes, config: ChainConfig,
                            policy: VotePolicy | None = None) -> str | None:
    if block.prev_hash != prev_hash:
        return "prev_hash does not link to parent"
    if block.compute_hash() != block.content_hash:
        return "content hash does not recompute"
    if block.config_digest != config.digest:
        return "config digest mismatch"
    if not schedule_is_partition(block.schedule, len(block.entries)):
        return "schedule is not a partition of the entries"
    if block.height > 0 and block.schedule != partition_conflicts(block.entries):
        return "schedule is not the conflict partition of the entries"
    if block.status == "pending":
        return "block is not finalized"
    rep = check_certificate(block.certificate, block.block_id, block.content_hash, config, policy,
                            require_quorum=block.status == "committed")
    if not rep.ok:
        return "certificate: " + rep.describe()
    if block.status == "aborted" and rep.meets_threshold:
        return "aborted block carries a passing certificate"
    return None


# ---------------------------------------------------------------------------
# gateway


def gateway_ingest(gateway: "Gateway", entry: LedgerEntry, submitted_at: int) -> Receipt:
    body = entry.body
    pk = gateway.keys.get(body.submitter)
    if pk is None or not verify_with_key(pk, body.signing_bytes(), body.signature):
        raise BadSignature(f"{entry.entry_id}: signature does not verify")
    if isinstance(body, Transaction) and body.group_size > gateway.max_block_size:
        raise MalformedPayload(f"{entry.entry_id}: atomic group larger than a block")
    payload = canonical_encode(("submission", submitted_at, entry))
    rid = gateway.queue.enqueue(payload)
    return Receipt(rid, entry.entry_id, gateway.queue.clock.now)


class Gateway:
    def __init__(self, registry, queue, config: ChainConfig):
        self.registry = registry
        self.queue = queue
        self.keys = config.key_map()
        self.max_block_size = config.max_block_size

    def ingest(self, entry: LedgerEntry | bytes, submitted_at: int | None = None) -> Receipt:
        if not isinstance(entry, LedgerEntry):
            try:
                entry = decode(entry)
            except ValueError as err:
                raise MalformedPayload(str(err)) from None
            if not isinstance(entry, LedgerEntry):
                raise MalformedPayload("payload is not a ledger entry")
        t = self.queue.clock.now if submitted_at is None else submitted_at
        return self.registry.invoke("ingest", 1, self, entry, t).output


def ingest_transaction(gateway: Gateway, tx: Transaction | LedgerEntry, submitted_at: int | None = None) -> Receipt:
    entry = tx if isinstance(tx, LedgerEntry) else LedgerEntry.wrap(tx)
    return gateway.ingest(entry, submitted_at)


# ---------------------------------------------------------------------------
# orchestrator


@dataclass
class PendingEntry:
    entry: LedgerEntry
    receipt: str
    submitted_at: int
    enqueue_time: int

    @property
    def group(self) -> tuple[str, int] | None:
        b = self.entry.body
        if isinstance(b, Transaction) and b.group_mode != "none":
            return b.group_id, b.group_size
        return None


@dataclass
class Outcome:
    status: str
    time: int
    height: int = -1
    reason: str = ""
    submitted_at: int = 0


@dataclass
class RoundResult:
    outcome: str
    block: Block | None
    start: int
    end: int
    votes: int = 0
    attempts: int = 1
    lagging: list[str] = field(default_factory=list)
    forgery: str = ""


def orchestrate_mint(orch: "Orchestrator", height: int, attempt: int, entries: list[LedgerEntry],
                     leader: str, timestamp: int) -> BlockProposal:
    cfg = orch.net.config
    block = Block(
        height=height, block_id=block_id_for(height, attempt), timestamp=timestamp, leader=leader,
        orchestration_digest=cfg.orchestrator_digest, config_digest=cfg.digest,
        prev_hash=orch.head_hash, entries=tuple(entries), schedule=partition_conflicts(entries),
    ).sealed()
    return BlockProposal(block, cfg.orchestrator_digest)


def mint_block(orch: "Orchestrator", max_n: int | None = None) -> BlockProposal | None:
    """Pull the queue and build the next proposal from ready entries, or None if there are none."""
    orch.pull()
    batch = orch.ready_batch(max_n)
    if not batch:
        return None
    return orchestrate_mint(orch, orch.height + 1, 0, [p.entry for p in batch],
                            rotate_leader(orch.net.config, orch.height + 1), orch.clock.now)


class Orchestrator:
    """Leader-side choreography: batching, vote collection, certificates.

    Holds dequeued entries until they reach a terminal outcome and only then
    acknowledges them on the queue.
    """

    def __init__(self, net):
        self.net = net
        self.clock = net.clock
        self.config: ChainConfig = net.config
        self.policy = VotePolicy.of(net.config)
        self.buffer: OrderedDict[str, PendingEntry] = OrderedDict()
        self.outcomes: dict[str, Outcome] = {}
        self.rounds: list[RoundResult] = []
        self.busy = False
        self.wake_at: int | None = None
        self.excluded: str | None = None
        self.forged_hashes: set[bytes] = set()
        self.forgeries = 0
        self.detections = 0
        self.rng = random.Random(derive_seed(net.seed, "orchestrator"))
        lat = net.latency
        self.timeout_us = 10 * lat.high_us
        self.chain: list[Block] = [net.genesis]

    @property
    def height(self) -> int:
        return self.chain[-1].height

    @property
    def head_hash(self) -> bytes:
        return self.chain[-1].content_hash

    def log(self, event: str, details: str = "", at: int | None = None) -> None:
        self.clock.trace.log(self.clock.now if at is None else at, "orchestrator", event, details)

    # -- queue side ----------------------------------------------------------
    def pull(self) -> int:
        items = self.net.queue.dequeue_batch(len(self.net.queue))
        n = 0
        done = []
        for it in items:
            _, submitted_at, entry = decode(it.payload)
            eid = entry.entry_id
            if eid in self.outcomes:
                done.append(it.receipt)
                continue
            if eid in self.buffer:
                self.buffer[eid].receipt = it.receipt
                continue
            self.buffer[eid] = PendingEntry(entry, it.receipt, submitted_at, it.enqueue_time)
            n += 1
        if done:
            self.net.queue.ack_many(done)
        return n

    def ready_batch(self, max_n: int | None = None) -> list[PendingEntry]:
        max_n = max_n or self.config.max_block_size
        counts: dict[str, int] = {}
        for p in self.buffer.values():
            g = p.group
            if g:
                counts[g[0]] = counts.get(g[0], 0) + 1
        batch: list[PendingEntry] = []
        placed: set[str] = set()
        for p in self.buffer.values():
            g = p.group
            if g is None:
                if len(batch) >= max_n:
                    break
                batch.append(p)
                continue
            gid, size = g
            if gid in placed or counts[gid] < size:
                continue
            members = [q for q in self.buffer.values() if q.group and q.group[0] == gid]
            if len(batch) + len(members) > max_n:
                break
            batch.extend(members)
            placed.add(gid)
        return batch

    def deadline(self, batch: list[PendingEntry]) -> int:
        best = None
        for p in batch:
            b = p.entry.body
            bound_ms = getattr(b, "latency_bound_ms", None) or self.config.default_latency_bound_ms
            d = p.submitted_at + bound_ms * US_PER_MS
            best = d if best is None else min(best, d)
        return best

    # -- scheduling ------------------------------------------------------------
    def poke(self) -> None:
        if self.busy:
            return
        self.pull()
        batch = self.ready_batch()
        if not batch:
            return
        now = self.clock.now
        if len(batch) >= self.config.max_block_size or now >= self.deadline(batch):
            self.busy = True
            result = self.run_round([p.entry for p in batch])
            self.clock.schedule_at(max(result.end, now), self._round_done)
        else:
            d = self.deadline(batch)
            if self.wake_at is None or d < self.wake_at or self.wake_at <= now:
                self.wake_at = d
                self.clock.schedule_at(d, self._wake, d)

    def _wake(self, when: int) -> None:
        if self.wake_at == when:
            self.wake_at = None
        self.poke()

    def _round_done(self) -> None:
        self.busy = False
        self.poke()

    # -- outcomes ----------------------------------------------------------------
    def _finish(self, entries: Iterable[LedgerEntry], status: str, t: int, height: int = -1, reason: str = "") -> None:
        receipts = []
        for e in entries:
            p = self.buffer.pop(e.entry_id, None)
            if p is None:
                continue
            self.outcomes[e.entry_id] = Outcome(status, t, height, reason, p.submitted_at)
            receipts.append(p.receipt)
        if receipts:
            self.net.queue.ack_many(receipts)

    def choose_leader(self, height: int, at: int) -> str | None:
        cfg = self.config
        if cfg.leader_mode == "dedicated":
            return cfg.dedicated_leader
        ids = cfg.node_ids
        start = ids.index(rotate_leader(cfg, height))
        for k in range(len(ids)):
            cand = ids[(start + k) % len(ids)]
            if cand == self.excluded and len(ids) > 1:
                continue
            if not self.net.faults.is_crashed(cand, at):
                return cand
        return None

    # -- the round -----------------------------------------------------------------
    def run_round(self, entries: list[LedgerEntry] | None = None) -> RoundResult:
        """Mint, verify, certify and apply one block starting at the current time."""
        net = self.net
        t0 = self.clock.now
        if entries is None:
            self.pull()
            entries = [p.entry for p in self.ready_batch()]
        if not entries:
            return RoundResult("empty", None, t0, t0)
        net.heal(t0)
        height = self.height + 1
        leader = self.choose_leader(height, t0)
        if leader is None:
            self.log("no_leader", f"height={height}")
            res = RoundResult("stalled", None, t0, t0 + self.timeout_us)
            self.rounds.append(res)
            return res
        self.excluded = None
        registry = net.orchestrator_registry(leader)
        net.meter.charge("orchestration_transition", ORCHESTRATION_TRANSITIONS)
        t = t0
        batch = list(entries)
        attempt = 0
        while True:
            inv = registry.invoke("orchestrate", 1, self, height, attempt, batch, leader, t, at=t)
            proposal: BlockProposal = inv.output
            t += inv.latency_us
            block = proposal.block
            self.log("mint", f"height={height} block={block.block_id} leader={leader} entries={len(batch)} "
                             f"lanes={len(block.schedule)}", at=t)
            responses = self._collect_votes(proposal, t)
            yes_times = [rt for rt, m in responses if m.verdict == "yes"]
            if len(yes_times) >= self.policy.threshold:
                t_q = yes_times[self.policy.threshold - 1]
                votes = tuple(m.vote for rt, m in sorted(responses, key=lambda r: r[1].node_id) if rt <= t_q)
                cert = VoteCertificate(block.block_id, block.content_hash, votes)
                if net.faults.nefarious_orchestrator and self.rng.random() < net.forge_probability:
                    return self._forge(block, cert, responses, t0, t_q, leader, attempt)
                return self._apply(block, cert, responses, t0, t_q, attempt)
            t_dec = max((rt for rt, _ in responses), default=t) if len(responses) == len(net.nodes) \
                else t + self.timeout_us
            rejected = sorted({eid for _, m in responses if m.verdict == "no" for eid in m.rejected})
            if rejected and attempt + 1 < MAX_REMINTS:
                reasons = {}
                for _, m in responses:
                    for part in m.reason.split("; "):
                        k, _, why = part.partition(": ")
                        reasons.setdefault(k, why)
                drop = set(rejected)
                for e in batch:
                    b = e.body
                    if e.entry_id in drop and isinstance(b, Transaction) and b.group_mode != "none":
                        drop.update(x.entry_id for x in batch
                                    if isinstance(x.body, Transaction) and x.body.group_id == b.group_id)
                dropped = [e for e in batch if e.entry_id in drop]
                for e in dropped:
                    self._finish([e], "rejected", t_dec, reason=reasons.get(e.entry_id, "rejected at verify"))
                self.log("remint", f"height={height} dropped={len(dropped)}", at=t_dec)
                batch = [e for e in batch if e.entry_id not in drop]
                t = t_dec
                attempt += 1
                if not batch:
                    res = RoundResult("empty", None, t0, t, attempts=attempt)
                    self.rounds.append(res)
                    return res
                continue
            votes = tuple(m.vote for _, m in sorted(responses, key=lambda r: r[1].node_id))
            cert = VoteCertificate(block.block_id, block.content_hash, votes)
            return self._abort(block, cert, responses, t0, t_dec, attempt)

    def _collect_votes(self, proposal: BlockProposal, t: int) -> list[tuple[int, VoteMessage]]:
        net = self.net
        block = proposal.block
        out = []
        for node in net.nodes.values():
            nid = node.node_id
            delivery = net.network.deliver()
            if delivery != "ok":
                net.trace.log(t, nid, f"verify_{delivery}", block.block_id)
                continue
            try:
                inv = node.account.functions.invoke("verify", 1, node, proposal, net.meter, at=t)
            except CrashFault:
                node.status = "crashed"
                net.trace.log(t, nid, "crash_fault", f"verify {block.block_id}")
                continue
            except StaleHead:
                net.trace.log(t, nid, "stale_head", block.block_id)
                continue
            msg: VoteMessage = inv.output
            arrival = t + inv.latency_us
            delivery = net.network.deliver()
            if delivery != "ok":
                net.trace.log(arrival, "orchestrator", f"vote_{delivery}", nid)
                continue
            pk = self.config.public_key(nid)
            if msg.block_hash != block.content_hash or not verify_with_key(
                    pk, vote_message(msg.block_id, msg.block_hash, msg.verdict), msg.signature):
                net.trace.log(arrival, "orchestrator", "vote_invalid", nid)
                continue
            net.trace.log(arrival, nid, "vote", f"{block.block_id} {msg.verdict}")
            out.append((arrival, msg))
        out.sort(key=lambda r: (r[0], r[1].node_id))
        return out

    def _fan_out(self, kind: str, block: Block, cert: VoteCertificate, t: int,
                 targets: Iterable[str]) -> tuple[list[int], bool, list[str]]:
        net = self.net
        acks, missing, refused = [], False, []
        for nid in targets:
            node = net.nodes[nid]
            if net.network.deliver() != "ok":
                net.trace.log(t, nid, f"{kind}_lost", block.block_id)
                missing = True
                continue
            try:
                inv = node.account.functions.invoke("apply", 1, node, block.block_id, cert, kind == "abort", at=t)
            except CrashFault:
                node.status = "crashed"
                net.trace.log(t, nid, "crash_fault", f"{kind} {block.block_id}")
                missing = True
                continue
            except (InvalidCertificate, StaleHead) as err:
                net.trace.log(t, nid, f"{kind}_refused", str(err))
                refused.append(nid)
                continue
            arrival = t + inv.latency_us
            if net.network.deliver() != "ok":
                missing = True
                continue
            acks.append(arrival)
        return acks, missing, refused

    def _apply(self, block, cert, responses, t0, t_q, attempt) -> RoundResult:
        targets = [m.node_id for _, m in responses]
        acks, missing, _ = self._fan_out("apply", block, cert, t_q, targets)
        end = max(acks, default=t_q)
        if missing:
            end = max(end, t_q + self.timeout_us)
        committed = block.with_status("committed", cert)
        self.chain.append(committed)
        commit_t = max(acks, default=t_q)
        self._finish(block.entries, "committed", commit_t, block.height)
        lagging = [nid for nid, n in self.net.nodes.items() if n.height < block.height]
        for nid in lagging:
            if self.net.nodes[nid].status == "active":
                self.net.nodes[nid].status = "lagging"
        self.log("commit", f"height={block.height} block={block.block_id} votes={len(cert.yes_voters())} "
                           f"txs={len(block.entries)} lagging={len(lagging)}", at=end)
        res = RoundResult("committed", committed, t0, end, len(cert.yes_voters()), attempt + 1, lagging)
        self.rounds.append(res)
        return res

    def _abort(self, block, cert, responses, t0, t_dec, attempt) -> RoundResult:
        targets = [m.node_id for _, m in responses]
        acks, missing, _ = self._fan_out("abort", block, cert, t_dec, targets)
        end = max(acks, default=t_dec)
        aborted = block.with_status("aborted", cert)
        self.chain.append(aborted)
        self._finish(block.entries, "aborted", end, block.height, "vote threshold not reached")
        lagging = [nid for nid, n in self.net.nodes.items() if n.height < block.height]
        self.log("abort", f"height={block.height} block={block.block_id} yes={len(cert.yes_voters())}", at=end)
        res = RoundResult("aborted", aborted, t0, end, len(cert.yes_voters()), attempt + 1, lagging)
        self.rounds.append(res)
        return res

    # -- adversarial orchestration ----------------------------------------------
    def _forge(self, block, cert, responses, t0, t_q, leader, attempt) -> RoundResult:
        """Try to get an uncertified block applied; honest nodes must refuse it."""
        mode = self.rng.choice(["inject", "replay", "inflate", "flip"])
        net = self.net
        bogus = LedgerEntry.wrap(Transaction(
            tx_id=f"forged-{block.block_id}-{mode}", submitter="mallory",
            writes=block.entries[0].body.writes if isinstance(block.entries[0].body, Transaction)
            else (("_meta/forged/x/y", b"1"),),
        ))
        forged_entries = block.entries + (bogus,)
        forged = replace(block, entries=forged_entries, schedule=partition_conflicts(forged_entries)).sealed()
        t_send = t_q
        if mode == "inflate":
            # the real block, padded with fabricated yes-votes
            keep = cert.votes[: max(self.policy.threshold - 1, 0)]
            fake = tuple(Vote(n, "yes", bytes(self.rng.getrandbits(8) for _ in range(64)))
                         for n in self.config.node_ids if n not in {v.node_id for v in keep})
            target, fcert = block, VoteCertificate(block.block_id, block.content_hash, keep + fake)
        else:
            # get the forged block staged on the nodes first, then certify it falsely
            proposal = BlockProposal(forged, self.config.orchestrator_digest)
            responses = self._collect_votes(proposal, t_q)
            t_send = max((rt for rt, _ in responses), default=t_q)
            if mode == "inject":
                votes = cert.votes
            elif mode == "replay":
                prev = self.chain[-1].certificate
                votes = prev.votes if prev is not None else cert.votes
            else:
                votes = tuple(Vote(m.node_id, "yes", m.signature)
                              for _, m in sorted(responses, key=lambda r: r[1].node_id))
            target, fcert = forged, VoteCertificate(forged.block_id, forged.content_hash, votes)
        self.forgeries += 1
        self.forged_hashes.add(target.content_hash)
        self.log("forge", f"mode={mode} block={target.block_id}", at=t_send)
        acks, missing, refused = self._fan_out("apply", target, fcert, t_send, list(net.nodes))
        self.detections += len(refused)
        if acks:
            self.log("forgery_accepted", f"nodes={len(acks)}", at=t_send)
        self.excluded = leader
        end = max(acks, default=t_send) + (self.timeout_us if missing or refused else 0)
        res = RoundResult("forged", None, t0, end, forgery=mode, attempts=attempt + 1)
        self.rounds.append(res)
        return res


def run_round(orchestrator: Orchestrator, network=None) -> RoundResult:
    return orchestrator.run_round()


def resync_node(node: Node, source: Iterable[bytes | Block]) -> Node:
    node.resync(source)
    return node


def apply_phase(node: Node, proposal: BlockProposal, certificate: VoteCertificate) -> str:
    return node.handle_apply(proposal.block.block_id, certificate)


def verify_phase(node: Node, proposal: BlockProposal) -> VoteMessage:
    return node.handle_verify(proposal)


def node_verify(node: Node, proposal: BlockProposal, meter=None) -> VoteMessage:
    return node.handle_verify(proposal, meter)


def node_apply(node: Node, block_id: str, certificate: VoteCertificate, abort: bool = False) -> str:
    if abort:
        return node.handle_abort(block_id, certificate)
    return node.handle_apply(block_id, certificate)
