"""Vote policies and offline certificate checking."""
from __future__ import annotations

from dataclasses import dataclass, field

from .ledger_model import POLICY_MODES, ChainConfig, VoteCertificate, verify_with_key, vote_message


@dataclass(frozen=True)
class VotePolicy:
    mode: str
    n: int

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ValueError(f"unknown policy {self.mode!r}")
        if self.n < 1:
            raise ValueError("policy needs at least one node")

    @property
    def threshold(self) -> int:
        if self.mode == "all":
            return self.n
        if self.mode == "majority":
            return self.n // 2 + 1
        return (2 * self.n) // 3 + 1

    @property
    def tolerated_faults(self) -> int:
        return self.n - self.threshold

    @classmethod
    def of(cls, config: ChainConfig) -> "VotePolicy":
        return cls(config.policy, len(config.nodes))


@dataclass
class AgreementReport:
    ok: bool
    valid_yes: list[str] = field(default_factory=list)
    valid_no: list[str] = field(default_factory=list)
    invalid: list[tuple[str, str]] = field(default_factory=list)
    threshold: int = 0
    binding_error: str | None = None

    @property
    def meets_threshold(self) -> bool:
        return len(self.valid_yes) >= self.threshold

    def describe(self) -> str:
        if self.ok:
            return f"ok ({len(self.valid_yes)}/{self.threshold} yes)"
        parts = []
        if self.binding_error:
            parts.append(self.binding_error)
        parts += [f"invalid signature from {n}: {why}" for n, why in self.invalid]
        if not self.meets_threshold:
            parts.append(f"{len(self.valid_yes)} valid yes-votes < threshold {self.threshold}")
        return "; ".join(parts)


def check_certificate(cert: VoteCertificate | None, block_id: str, block_hash: bytes,
                      config: ChainConfig, policy: VotePolicy | None = None,
                      require_quorum: bool = True) -> AgreementReport:
    """Validate every signature of ``cert`` against ``(block_id, block_hash)``.

    Needs only the config's public keys. ``ok`` requires a correct binding,
    no invalid or duplicate votes and, if ``require_quorum``, at least the
    policy threshold of yes-votes.
    """
    policy = policy or VotePolicy.of(config)
    rep = AgreementReport(ok=False, threshold=policy.threshold)
    if cert is None:
        rep.binding_error = "missing certificate"
        return rep
    if cert.block_id != block_id or cert.block_hash != block_hash:
        rep.binding_error = "certificate does not bind this block's id and hash"
    members = set(config.node_ids)
    keys = config.key_map()
    seen: set[str] = set()
    for v in cert.votes:
        if v.node_id in seen:
            rep.invalid.append((v.node_id, "duplicate vote"))
            continue
        seen.add(v.node_id)
        if v.node_id not in members:
            rep.invalid.append((v.node_id, "not a chain node"))
            continue
        if not verify_with_key(keys[v.node_id], vote_message(block_id, block_hash, v.verdict), v.signature):
            rep.invalid.append((v.node_id, "signature does not verify"))
            continue
        (rep.valid_yes if v.verdict == "yes" else rep.valid_no).append(v.node_id)
    rep.ok = rep.binding_error is None and not rep.invalid and (rep.meets_threshold or not require_quorum)
    return rep
