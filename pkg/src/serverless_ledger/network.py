"""Provisioning: turn a compiled data model into an N-node simulated deployment."""
from __future__ import annotations

from dataclasses import dataclass

from .consensus import (
    BadSignature,
    ChainVerificationFailure,
    Gateway,
    MalformedPayload,
    Node,
    Orchestrator,
    Outcome,
    gateway_ingest,
    node_apply,
    node_verify,
    orchestrate_mint,
)
from .ledger_model import (
    ChainConfig,
    CodeRef,
    Keyring,
    LedgerEntry,
    Principal,
    make_genesis,
)
from .schema import CompiledChainSpec
from .substrate import (
    BillingMeter,
    BlobStore,
    DurableQueue,
    EventTrace,
    FaultPlan,
    FunctionRegistry,
    KVStore,
    LatencyRange,
    Network,
    SimClock,
    UnitPrices,
    code_of,
    derive_seed,
    digest,
)

CONSENSUS_FUNCTIONS = (("verify", node_verify), ("apply", node_apply))


@dataclass
class NodeAccount:
    """One participant's isolated bundle of cloud resources."""

    node_id: str
    state: KVStore
    ledger: KVStore
    blobs: BlobStore
    functions: FunctionRegistry
    queue: DurableQueue


def make_chain_config(node_ids: list[str], keyring: Keyring, clients: list[str] = (), *,
                      chain_id: str = "chain", policy: str = "majority", max_block_size: int = 900,
                      leader_mode: str = "rotating", dedicated_leader: str = "",
                      default_latency_bound_ms: int = 100) -> ChainConfig:
    nodes = tuple(Principal(n, keyring.register(n)) for n in node_ids)
    principals = tuple(Principal(c, keyring.register(c)) for c in clients)
    return ChainConfig(
        chain_id=chain_id, nodes=nodes, principals=principals, policy=policy,
        max_block_size=max_block_size, leader_mode=leader_mode, dedicated_leader=dedicated_leader,
        default_latency_bound_ms=default_latency_bound_ms,
        orchestrator_digest=digest(code_of(orchestrate_mint)),
    )


class ChainNetwork:
    """Handle to a provisioned deployment and its simulated substrate."""

    def __init__(self, spec: CompiledChainSpec, config: ChainConfig, keyring: Keyring, clock: SimClock,
                 faults: FaultPlan, latency: LatencyRange, meter: BillingMeter, seed: int,
                 forge_probability: float = 0.5):
        self.spec = spec
        self.config = config
        self.keyring = keyring
        self.clock = clock
        self.trace = clock.trace
        self.faults = faults
        self.latency = latency
        self.meter = meter
        self.seed = seed
        self.forge_probability = forge_probability
        self.network = Network(faults, seed)
        self.queue = DurableQueue("pending", clock, meter=meter)
        self.accounts: dict[str, NodeAccount] = {}
        self.nodes: dict[str, Node] = {}
        self.registries: dict[str, FunctionRegistry] = {}
        self.genesis = None
        self.gateway: Gateway | None = None
        self.orchestrator: Orchestrator | None = None
        self.resyncs = 0

    def _registry(self, owner: str) -> FunctionRegistry:
        return FunctionRegistry(owner, self.clock, self.seed, self.latency, self.faults, self.meter)

    def orchestrator_registry(self, leader: str) -> FunctionRegistry:
        return self.registries[leader]

    def submit(self, entry: LedgerEntry, at: int | None = None) -> None:
        """Client submission at ``at``; the gateway enqueues after its invocation latency."""
        t = self.clock.now if at is None else at
        self.clock.schedule_at(t, self._arrive, entry, t)

    def _arrive(self, entry: LedgerEntry, t: int) -> None:
        orch = self.orchestrator
        if self.network.deliver("client") != "ok":
            orch.outcomes[entry.entry_id] = _outcome("rejected", t, "lost on client link", t)
            self.trace.log(t, "gateway", "client_lost", entry.entry_id)
            return
        delay = self.latency.draw(self.gateway.registry.rng)
        self.clock.schedule(delay, self._ingest, entry, t)

    def _ingest(self, entry: LedgerEntry, t: int) -> None:
        try:
            self.gateway.ingest(entry, t)
        except (BadSignature, MalformedPayload) as err:
            self.orchestrator.outcomes[entry.entry_id] = _outcome("rejected", self.clock.now, str(err), t)
            self.trace.log(self.clock.now, "gateway", "reject", entry.entry_id)
            return
        self.orchestrator.poke()

    def heal(self, at: int | None = None) -> list[str]:
        """Resync every reachable node that is behind the longest verified chain."""
        t = self.clock.now if at is None else at
        healed = []
        orch_chain = self.orchestrator.chain if self.orchestrator else []
        for node in self.nodes.values():
            if self.faults.is_crashed(node.node_id, t):
                node.status = "crashed"
                continue
            best = max(self.nodes.values(), key=lambda n: (n.height, n.node_id == node.node_id))
            target = max(best.height, orch_chain[-1].height if orch_chain else -1)
            if node.height >= target:
                if node.status != "active":
                    node.status = "active"
                continue
            node.status = "lagging"
            if best.height >= target and best is not node:
                source = [best.account.ledger.value(k) for k in best.account.ledger.keys("block/")
                          if int(k.split("/")[1]) > node.height]
            else:
                source = [b for b in orch_chain if b.height > node.height]
            try:
                n = node.resync(source)
            except ChainVerificationFailure as err:
                self.trace.log(t, node.node_id, "resync_failed", str(err))
                continue
            self.resyncs += 1
            healed.append(node.node_id)
            self.trace.log(t, node.node_id, "resync", f"blocks={n} height={node.height}")
        return healed


def _outcome(status, t, reason, submitted):
    return Outcome(status, t, -1, reason, submitted)


def publish_code(net: ChainNetwork, name: str, version: int, code: bytes) -> CodeRef:
    """Embargo ``code`` in every node's blob store and return its on-chain reference."""
    key = f"code/{name}@{version}"
    d = None
    for acct in net.accounts.values():
        d = acct.blobs.put(key, code, embargo=True)
    return CodeRef(name, version, d, key)


def provision_network(spec: CompiledChainSpec, config: ChainConfig, keyring: Keyring, *,
                      faults: FaultPlan | None = None, seed: int = 0, latency: LatencyRange | None = None,
                      prices: UnitPrices | None = None, trace: EventTrace | None = None,
                      forge_probability: float = 0.5) -> ChainNetwork:
    if not isinstance(config, ChainConfig):
        raise ValueError("invalid config")
    for n in config.node_ids:
        if keyring.public.get(n) != config.public_key(n):
            raise ValueError(f"invalid config: key for {n} does not match the keyring")
    faults = faults or FaultPlan()
    latency = latency or LatencyRange()
    meter = BillingMeter(prices or UnitPrices())
    clock = SimClock(seed, trace if trace is not None else EventTrace())
    net = ChainNetwork(spec, config, keyring, clock, faults, latency, meter, seed, forge_probability)

    gw = net._registry("gateway")
    gw.publish("ingest", 1, gateway_ingest)
    net.gateway = Gateway(gw, net.queue, config)

    code = {name: code_of(fn) for name, fn in CONSENSUS_FUNCTIONS}
    for nid in config.node_ids:
        reg = net._registry(nid)
        for name, fn in CONSENSUS_FUNCTIONS:
            reg.publish(name, 1, fn, code[name])
        if reg.publish("orchestrate", 1, orchestrate_mint) != config.orchestrator_digest:
            raise ValueError("invalid config: orchestrator digest does not match the published version")
        acct = NodeAccount(nid, KVStore(nid, meter), KVStore(nid, meter), BlobStore(nid, meter), reg, net.queue)
        net.accounts[nid] = acct
        net.registries[nid] = reg
        net.nodes[nid] = Node(acct, config, keyring, lane_seed=derive_seed(seed, "lanes"))
    if config.leader_mode == "dedicated" and config.dedicated_leader not in net.registries:
        reg = net._registry(config.dedicated_leader)
        reg.publish("orchestrate", 1, orchestrate_mint)
        net.registries[config.dedicated_leader] = reg

    refs = [publish_code(net, name, 1, code[name]) for name, _ in CONSENSUS_FUNCTIONS]
    genesis = make_genesis(config, spec.document, spec.digest, refs, keyring)
    net.genesis = genesis
    for node in net.nodes.values():
        node.install_genesis(genesis)
    net.orchestrator = Orchestrator(net)
    # a restarted node catches up on its own, even if no further round runs
    for _, _, end in faults.node_crashes:
        clock.schedule_at(end, net.heal, end)
    for k in meter.counts:
        meter.counts[k] = 0
    clock.log("provision", "genesis", f"nodes={len(config.nodes)} hash={genesis.content_hash.hex()[:16]}")
    return net
