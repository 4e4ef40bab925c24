"""Per-transaction cost: pay-per-request billing amortized over a block vs rented servers."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

from .substrate import UnitPrices

ANCHOR_SINGLE = (1, 1e-4)
ANCHOR_FULL = (900, 1e-5)


@dataclass(frozen=True)
class ServerlessCostParams:
    """cost(n) = per_tx + per_block / n for a block of n transactions."""

    per_tx: float
    per_block: float
    max_block_size: int = 900

    def __post_init__(self):
        if self.per_tx <= 0 or self.per_block <= 0:
            raise ValueError("serverless cost coefficients must be positive")
        if self.max_block_size < 1:
            raise ValueError("max_block_size must be >= 1")


def calibrate_serverless(anchor1: tuple[int, float] = ANCHOR_SINGLE, anchor2: tuple[int, float] = ANCHOR_FULL,
                         max_block_size: int | None = None) -> ServerlessCostParams:
    (n1, c1), (n2, c2) = anchor1, anchor2
    if n1 == n2 or n1 < 1 or n2 < 1:
        raise ValueError("degenerate anchors: batch sizes must be distinct and positive")
    # a + b/n1 = c1, a + b/n2 = c2
    b = (c1 - c2) / (1 / n1 - 1 / n2)
    a = c1 - b / n1
    return ServerlessCostParams(a, b, max_block_size or max(n1, n2))


def per_tx_cost_serverless(params: ServerlessCostParams, n: float) -> float:
    if not 1 <= n <= params.max_block_size:
        raise ValueError(f"batch size {n} outside [1, {params.max_block_size}]")
    return params.per_tx + params.per_block / n


@dataclass(frozen=True)
class ServerfulCostParams:
    name: str
    rate_usd_per_s: float
    nodes: int
    max_throughput: float
    redundancy: int = 1

    def __post_init__(self):
        if self.max_throughput <= 0:
            raise ValueError("max throughput must be positive")
        if self.redundancy not in (1, 3):
            raise ValueError("redundancy factor is 1 or 3")


@dataclass(frozen=True)
class ServerfulCost:
    usd_per_tx: float
    crash_risk: bool


def per_tx_cost_serverful(params: ServerfulCostParams, throughput: float) -> ServerfulCost:
    if throughput <= 0:
        raise ValueError("throughput must be positive")
    cost = params.nodes * params.rate_usd_per_s * params.redundancy / throughput
    return ServerfulCost(cost, throughput >= params.max_throughput)


def expected_batch_size(rate: float, latency_bound_s: float, max_n: int = 900) -> int:
    if rate <= 0 or latency_bound_s <= 0:
        raise ValueError("rate and latency bound must be positive")
    return min(max_n, max(1, math.floor(rate * latency_bound_s)))


# Synthetic reference deployments; rates are plausible on-demand VM prices, not measurements.
DEFAULT_SERVERFUL = (
    ServerfulCostParams("bft8_small", 0.0000464, 8, 2000.0, 1),
    ServerfulCostParams("bft8_small_x3", 0.0000464, 8, 2000.0, 3),
    ServerfulCostParams("bft8_large", 0.000371, 8, 20000.0, 1),
)


@dataclass
class CostCurve:
    configs: list[str]
    rows: list[tuple]  # (throughput, serverless, *serverful)
    crash_risk: list[tuple]  # per row, per config
    crossovers: dict[str, float | None]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["throughput_tps", "serverless_usd_per_tx"] + [f"{c}_usd_per_tx" for c in self.configs])
        for r in self.rows:
            w.writerow([f"{r[0]:g}"] + [repr(float(x)) for x in r[1:]])
        return buf.getvalue()


def generate_cost_curve(serverless: ServerlessCostParams, serverful: Sequence[ServerfulCostParams],
                        grid: Sequence[float], latency_bound_s: float = 0.1) -> CostCurve:
    """Tabulate both cost models over ``grid``.

    The crossover for a config is the first grid throughput at which it
    becomes strictly cheaper than serverless (None if it never does).
    """
    if not grid:
        raise ValueError("empty throughput grid")
    rows, risk = [], []
    crossovers: dict[str, float | None] = {c.name: None for c in serverful}
    for tps in grid:
        n = expected_batch_size(tps, latency_bound_s, serverless.max_block_size)
        sl = per_tx_cost_serverless(serverless, n)
        costs = [per_tx_cost_serverful(c, tps) for c in serverful]
        rows.append((tps, sl, *[c.usd_per_tx for c in costs]))
        risk.append(tuple(c.crash_risk for c in costs))
        for cfg, c in zip(serverful, costs):
            if crossovers[cfg.name] is None and c.usd_per_tx < sl:
                crossovers[cfg.name] = tps
    return CostCurve([c.name for c in serverful], rows, risk, crossovers)


def parse_grid(spec: str) -> list[float]:
    """``a:b:step`` inclusive of b (within float slack), or a comma list."""
    if ":" not in spec:
        vals = [float(x) for x in spec.split(",") if x.strip()]
    else:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid must be a:b:step, got {spec!r}")
        a, b, step = map(float, parts)
        if step <= 0 or b < a:
            raise ValueError(f"bad grid {spec!r}")
        k = int(math.floor((b - a) / step + 1e-9))
        vals = [a + i * step for i in range(k + 1)]
    if not vals or any(v <= 0 for v in vals):
        raise ValueError("grid values must be positive")
    return vals


# ---------------------------------------------------------------------------
# unit prices for the billing meter


def calibrate_unit_prices(params: ServerlessCostParams, nodes: int = 8, writes_per_tx: int = 1,
                          queue_op: float = 4.0e-7, storage_write: float = 2.5e-7) -> UnitPrices:
    """Unit prices under which the simulator's metered bill reproduces ``params``.

    Per transaction the simulator bills 1 + nodes invocations, 2 queue
    operations and nodes * writes_per_tx storage writes; per block it bills
    1 + 2 * nodes invocations, 2 * nodes storage writes and a fixed number of
    orchestration transitions. Queue and storage prices are taken as given;
    the invocation price closes the per-tx equation and the transition price
    the per-block one.
    """
    from .consensus import ORCHESTRATION_TRANSITIONS

    inv = (params.per_tx - 2 * queue_op - nodes * writes_per_tx * storage_write) / (1 + nodes)
    trans = (params.per_block - (1 + 2 * nodes) * inv - 2 * nodes * storage_write) / ORCHESTRATION_TRANSITIONS
    if inv <= 0 or trans <= 0:
        raise ValueError("queue/storage prices too high to reach the requested cost")
    return UnitPrices(function_invocation=inv, queue_op=queue_op, storage_write=storage_write,
                      orchestration_transition=trans)
