"""Simulated serverless cloud primitives.

Everything here runs in-process on a discrete-event clock: a durable queue
with visibility timeouts, a versioned key-value store with conditional
writes, a blob store with embargo (write-once-forever) semantics, a
versioned function registry, fault injection and a billing meter.
"""
from __future__ import annotations

import hashlib
import heapq
import inspect
import itertools
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable


US_PER_MS = 1_000
US_PER_S = 1_000_000


class SubstrateError(Exception):
    """Base class for substrate failures."""


class VersionConflict(SubstrateError):
    def __init__(self, key: str, expected: int | None, current: int):
        super().__init__(f"{key}: expected version {expected}, current {current}")
        self.key = key
        self.expected = expected
        self.current = current


class ImmutabilityViolation(SubstrateError):
    pass


class UnknownFunction(SubstrateError):
    pass


class CrashFault(SubstrateError):
    pass


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derive_seed(seed: int, label: str) -> int:
    """Independent 64-bit sub-seed for a named random stream."""
    h = hashlib.sha256(seed.to_bytes(8, "big", signed=False) + label.encode())
    return int.from_bytes(h.digest()[:8], "big")


# ---------------------------------------------------------------------------
# clock and trace


class EventTrace:
    """Append-only ``time|component|event|details`` log."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.lines: list[str] = []

    def log(self, time_us: int, component: str, event: str, details: str = "") -> None:
        if self.enabled:
            self.lines.append(f"{time_us}|{component}|{event}|{details}")

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


class SimClock:
    """Discrete-event clock in integer microseconds.

    Events at equal times fire in scheduling order, so a run is a pure
    function of the scenario and seed.
    """

    def __init__(self, seed: int = 0, trace: EventTrace | None = None):
        self.now = 0
        self.rng_seed = seed
        self.trace = trace if trace is not None else EventTrace()
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = itertools.count()

    def schedule_at(self, when: int, fn: Callable, *args: Any) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        heapq.heappush(self._queue, (when, next(self._seq), fn, args))

    def schedule(self, delay: int, fn: Callable, *args: Any) -> None:
        self.schedule_at(self.now + delay, fn, *args)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        if not self._queue:
            return False
        when, _, fn, args = heapq.heappop(self._queue)
        self.now = when
        fn(*args)
        return True

    def run(self, until: int | None = None, max_events: int | None = None) -> int:
        n = 0
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                self.now = max(self.now, until)
                break
            if max_events is not None and n >= max_events:
                break
            self.step()
            n += 1
        return n

    def log(self, component: str, event: str, details: str = "") -> None:
        self.trace.log(self.now, component, event, details)


# ---------------------------------------------------------------------------
# billing


@dataclass
class UnitPrices:
    """USD per billable operation."""

    function_invocation: float = 7.888765e-07
    queue_op: float = 4.0e-07
    storage_write: float = 2.5e-07
    orchestration_transition: float = 1.8172303e-05


@dataclass
class BillingMeter:
    prices: UnitPrices = field(default_factory=UnitPrices)
    counts: dict[str, int] = field(default_factory=lambda: {
        "function_invocation": 0,
        "queue_op": 0,
        "storage_write": 0,
        "orchestration_transition": 0,
    })

    def charge(self, kind: str, units: int = 1) -> None:
        self.counts[kind] += units

    @property
    def total(self) -> float:
        return sum(getattr(self.prices, k) * v for k, v in self.counts.items())


# ---------------------------------------------------------------------------
# durable queue


@dataclass
class QueueItem:
    receipt: str
    enqueue_time: int
    payload: bytes
    visible_at: int = 0
    deliveries: int = 0


class DurableQueue:
    """Unbounded FIFO with at-least-once delivery.

    A dequeued item stays invisible for ``visibility_timeout_us``; if it is
    not acknowledged by then it becomes deliverable again.
    """

    def __init__(self, owner: str, clock: SimClock, visibility_timeout_us: int = 30 * US_PER_S,
                 meter: BillingMeter | None = None):
        self.owner = owner
        self.clock = clock
        self.visibility_timeout_us = visibility_timeout_us
        self.meter = meter
        self.items: list[QueueItem] = []
        self.acked: set[str] = set()
        self._counter = itertools.count()

    def __len__(self) -> int:
        return len(self.items)

    def enqueue(self, payload: bytes, at: int | None = None) -> str:
        if not payload:
            raise ValueError("empty payload")
        t = self.clock.now if at is None else at
        receipt = f"{self.owner}-{next(self._counter):010d}"
        self.items.append(QueueItem(receipt, t, bytes(payload), visible_at=t))
        if self.meter:
            self.meter.charge("queue_op")
        return receipt

    def visible_count(self, now: int | None = None) -> int:
        t = self.clock.now if now is None else now
        return sum(1 for it in self.items if it.visible_at <= t)

    def peek_visible(self, now: int | None = None) -> list[QueueItem]:
        t = self.clock.now if now is None else now
        return [it for it in self.items if it.visible_at <= t]

    def dequeue_batch(self, max_items: int) -> list[QueueItem]:
        now = self.clock.now
        out = []
        for it in self.items:
            if len(out) >= max_items:
                break
            if it.visible_at <= now:
                it.visible_at = now + self.visibility_timeout_us
                it.deliveries += 1
                out.append(it)
        return out

    def ack(self, receipt: str) -> bool:
        for i, it in enumerate(self.items):
            if it.receipt == receipt:
                del self.items[i]
                self.acked.add(receipt)
                if self.meter:
                    self.meter.charge("queue_op")
                return True
        return False

    def ack_many(self, receipts: Iterable[str]) -> int:
        wanted = set(receipts)
        keep = []
        n = 0
        for it in self.items:
            if it.receipt in wanted:
                self.acked.add(it.receipt)
                n += 1
            else:
                keep.append(it)
        self.items = keep
        if self.meter and n:
            self.meter.charge("queue_op", n)
        return n


# ---------------------------------------------------------------------------
# key-value store


class KVStore:
    def __init__(self, owner: str, meter: BillingMeter | None = None):
        self.owner = owner
        self.meter = meter
        self.entries: dict[str, tuple[bytes, int]] = {}
        self._groups: dict[str, set[str]] = {}  # first path segment -> keys

    def get(self, key: str) -> tuple[bytes, int] | None:
        return self.entries.get(key)

    def value(self, key: str) -> bytes | None:
        e = self.entries.get(key)
        return None if e is None else e[0]

    def version(self, key: str) -> int:
        e = self.entries.get(key)
        return 0 if e is None else e[1]

    def write_conditional(self, key: str, value: bytes, expected_version: int | None = None) -> int:
        """Store ``value`` if the key is at ``expected_version``.

        ``None`` means the key must be absent. Raises VersionConflict and
        leaves the store untouched otherwise.
        """
        if expected_version is not None and expected_version < 0:
            raise ValueError("expected_version must be >= 0")
        current = self.version(key)
        want = 0 if expected_version is None else expected_version
        if current != want:
            raise VersionConflict(key, expected_version, current)
        self.entries[key] = (bytes(value), current + 1)
        if current == 0:
            self._groups.setdefault(key.split("/", 1)[0], set()).add(key)
        if self.meter:
            self.meter.charge("storage_write")
        return current + 1

    def put(self, key: str, value: bytes) -> int:
        return self.write_conditional(key, value, self.version(key))

    def delete(self, key: str) -> None:
        if self.entries.pop(key, None) is not None:
            self._groups[key.split("/", 1)[0]].discard(key)

    def keys(self, prefix: str = "") -> list[str]:
        pool = self._groups.get(prefix.split("/", 1)[0], ()) if "/" in prefix else self.entries
        return sorted(k for k in pool if k.startswith(prefix))

    def snapshot(self) -> dict[str, tuple[bytes, int]]:
        return dict(self.entries)

    def fingerprint(self) -> bytes:
        h = hashlib.sha256()
        for k in sorted(self.entries):
            v, ver = self.entries[k]
            h.update(len(k).to_bytes(4, "big") + k.encode())
            h.update(len(v).to_bytes(4, "big") + v + ver.to_bytes(8, "big"))
        return h.digest()


# ---------------------------------------------------------------------------
# blob store


@dataclass
class Blob:
    data: bytes
    embargoed: bool
    digest: bytes


class BlobStore:
    def __init__(self, owner: str, meter: BillingMeter | None = None):
        self.owner = owner
        self.meter = meter
        self.objects: dict[str, Blob] = {}

    def put(self, key: str, data: bytes, embargo: bool = False) -> bytes:
        cur = self.objects.get(key)
        if cur is not None and cur.embargoed:
            raise ImmutabilityViolation(f"{key} is embargoed")
        d = digest(data)
        self.objects[key] = Blob(bytes(data), embargo, d)
        if self.meter:
            self.meter.charge("storage_write")
        return d

    def get(self, key: str) -> Blob | None:
        return self.objects.get(key)

    def delete(self, key: str) -> None:
        cur = self.objects.get(key)
        if cur is not None and cur.embargoed:
            raise ImmutabilityViolation(f"{key} is embargoed")
        self.objects.pop(key, None)

    def is_embargoed(self, key: str) -> bool:
        b = self.objects.get(key)
        return b is not None and b.embargoed


# ---------------------------------------------------------------------------
# fault plan


@dataclass(frozen=True)
class FaultPlan:
    node_crashes: tuple[tuple[str, int, int], ...] = ()
    message_loss_rate: float = 0.0
    message_corrupt_rate: float = 0.0
    nefarious_orchestrator: bool = False
    client_loss_rate: float = 0.0

    def __post_init__(self):
        for name in ("message_loss_rate", "message_corrupt_rate", "client_loss_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for node, start, end in self.node_crashes:
            if end < start:
                raise ValueError(f"crash window for {node} ends before it starts")

    def is_crashed(self, node: str, at: int) -> bool:
        return any(n == node and start <= at < end for n, start, end in self.node_crashes)


class Network:
    """Message delivery under a FaultPlan.

    ``deliver`` returns "ok", "lost" or "corrupt". Corruption is surfaced as
    a digest failure at the receiver rather than as altered content.
    """

    def __init__(self, plan: FaultPlan, seed: int):
        self.plan = plan
        self.rng = random.Random(derive_seed(seed, "faults"))
        self.stats = {"ok": 0, "lost": 0, "corrupt": 0}

    def deliver(self, link: str = "protocol") -> str:
        loss = self.plan.client_loss_rate if link == "client" else self.plan.message_loss_rate
        corrupt = 0.0 if link == "client" else self.plan.message_corrupt_rate
        outcome = "ok"
        if loss > 0.0 and self.rng.random() < loss:
            outcome = "lost"
        elif corrupt > 0.0 and self.rng.random() < corrupt:
            outcome = "corrupt"
        self.stats[outcome] += 1
        return outcome


def inject(plan: FaultPlan, scenario: Any) -> Any:
    """Attach ``plan`` to anything carrying a ``faults`` attribute."""
    scenario.faults = plan
    return scenario


# ---------------------------------------------------------------------------
# function registry


@dataclass(frozen=True)
class LatencyRange:
    low_us: int = 8 * US_PER_MS
    high_us: int = 10 * US_PER_MS

    def __post_init__(self):
        if not 0 <= self.low_us <= self.high_us:
            raise ValueError("latency range must satisfy 0 <= low <= high")

    def draw(self, rng: random.Random) -> int:
        return rng.randint(self.low_us, self.high_us)


def code_of(fn: Callable) -> bytes:
    try:
        return inspect.getsource(fn).encode()
    except (OSError, TypeError):
        return f"{fn.__module__}.{fn.__qualname__}".encode()


@dataclass
class Invocation:
    output: Any
    digest: bytes
    latency_us: int


class FunctionRegistry:
    """Published (name, version) pairs are frozen to their code digest."""

    def __init__(self, owner: str, clock: SimClock, seed: int = 0,
                 latency: LatencyRange | None = None, plan: FaultPlan | None = None,
                 meter: BillingMeter | None = None):
        self.owner = owner
        self.clock = clock
        self.latency = latency or LatencyRange()
        self.plan = plan or FaultPlan()
        self.meter = meter
        self.rng = random.Random(derive_seed(seed, f"latency:{owner}"))
        self.functions: dict[tuple[str, int], bytes] = {}
        self._handlers: dict[tuple[str, int], Callable | None] = {}

    def publish(self, name: str, version: int, handler: Callable | None, code: bytes | None = None) -> bytes:
        key = (name, version)
        code = code if code is not None else code_of(handler)
        d = digest(code)
        if key in self.functions:
            if self.functions[key] != d:
                raise ImmutabilityViolation(f"{name}@{version} already published with another digest")
            return d
        self.functions[key] = d
        self._handlers[key] = handler
        return d

    def digest_of(self, name: str, version: int) -> bytes:
        try:
            return self.functions[(name, version)]
        except KeyError:
            raise UnknownFunction(f"{name}@{version}") from None

    def invoke(self, name: str, version: int, *args: Any, at: int | None = None, **kwargs: Any) -> Invocation:
        """Run a published handler; ``at`` is the simulated call time (defaults to now)."""
        key = (name, version)
        if key not in self.functions:
            raise UnknownFunction(f"{name}@{version}")
        t = self.clock.now if at is None else at
        if self.plan.is_crashed(self.owner, t):
            raise CrashFault(f"{self.owner} is down at t={t}")
        handler = self._handlers[key]
        if handler is None:
            raise UnknownFunction(f"{name}@{version} has no executable handler")
        if self.meter:
            self.meter.charge("function_invocation")
        out = handler(*args, **kwargs)
        return Invocation(out, self.functions[key], self.latency.draw(self.rng))


def invoke_function(registry: FunctionRegistry, name: str, version: int, *args: Any, **kwargs: Any) -> tuple[Any, bytes]:
    inv = registry.invoke(name, version, *args, **kwargs)
    return inv.output, inv.digest
