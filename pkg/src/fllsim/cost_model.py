"""Closed-form cost and probability oracles for the protocol.

Covers retrieval compute cost vs a linear scan, fixed per-block knowledge
storage vs an on-chain similarity table, client-block broadcast cost, the
committee collusion probability, and the per-task latency decomposition.
All functions are pure; the simulator's measured counters are checked
against them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class CostParams:
    clients: int  # c
    tasks: int  # t, tasks completed so far
    stored_per_round: int  # c', knowledge records per client block
    dim: int  # d, model/knowledge dimension
    n_buckets: int = 64  # M
    groups: int = 4  # hash groups
    candidate_exponent: float = 0.7  # rho, candidate fraction exponent
    float_bits: int = 32  # b+ per stored float
    int_bits: int = 32  # b- per stored bucket id
    rounds_per_task: int = 5  # R

    def __post_init__(self):
        if min(self.clients, self.stored_per_round, self.dim, self.n_buckets,
               self.groups, self.float_bits, self.int_bits,
               self.rounds_per_task) <= 0 or self.tasks < 0:
            raise ValueError("cost parameters must be positive (tasks >= 0)")
        if not 0.0 < self.candidate_exponent <= 1.0:
            raise ValueError("candidate_exponent must be in (0, 1]")


@dataclass(frozen=True)
class LatencyParams:
    train_s: float = 0.0
    p2p_s: float = 0.0
    agg_s: float = 0.0
    block_s: float = 0.0
    broadcast_s: float = 0.0
    knowledge_search_s: float = 0.0
    p2p_rate_bytes_per_s: float = 50e6  # peer-to-peer transfer rate

    def __post_init__(self):
        vals = (self.train_s, self.p2p_s, self.agg_s, self.block_s,
                self.broadcast_s, self.knowledge_search_s)
        if any(v < 0 for v in vals) or self.p2p_rate_bytes_per_s <= 0:
            raise ValueError("latency components must be non-negative")


# ---------------------------------------------------------------------------
# retrieval compute cost


def index_compute_cost(p: CostParams) -> float:
    """Hash-index retrieval cost for one round: (ct)^rho * d + M*groups*d."""
    ct = p.clients * p.tasks
    return (ct ** p.candidate_exponent) * p.dim + p.n_buckets * p.groups * p.dim


def linear_compute_cost(p: CostParams) -> float:
    """Exhaustive cosine scan cost for one round: c*t*d."""
    return p.clients * p.tasks * p.dim


def index_crossover_threshold(n_buckets: int, groups: int) -> float:
    """Knowledge count beyond which the hash index beats a linear scan,
    under the uniform bucket-load model: M^2 * groups / (M - 1)."""
    if n_buckets < 2:
        raise ValueError("threshold defined for n_buckets >= 2")
    return n_buckets ** 2 * groups / (n_buckets - 1)


def estimate_candidate_exponent(mean_candidates: float, knowledge_count: int) -> float:
    """Empirical rho: log(mean candidate count) / log(stored knowledge).
    Falls back to 1.0 (the linear-scan exponent) when nothing was measured."""
    if knowledge_count <= 1 or mean_candidates <= 1.0:
        return 1.0
    return min(1.0, math.log(mean_candidates) / math.log(knowledge_count))


# ---------------------------------------------------------------------------
# storage and broadcast cost


def onchain_block_bits(p: CostParams) -> int:
    """Knowledge payload of one client block: c' * groups * int_bits.
    Constant in the number of tasks."""
    return p.stored_per_round * p.groups * p.int_bits


def baseline_table_bits(p: CostParams) -> int:
    """Per-block cost of storing the full similarity table instead:
    c' * c * t * float_bits."""
    return p.stored_per_round * p.clients * p.tasks * p.float_bits


def onchain_beats_baseline(p: CostParams) -> bool:
    return baseline_table_bits(p) > onchain_block_bits(p)


def broadcast_bits(p: CostParams, n_servers: int) -> int:
    """Bits to broadcast one client block to the other c+s-1 nodes."""
    return onchain_block_bits(p) * (p.clients + n_servers - 1)


def broadcast_savings_bits(p: CostParams, n_servers: int) -> int:
    """Bits saved versus broadcasting the similarity-table block:
    (c*t*float_bits - groups*int_bits) * c' * (c+s-1)."""
    per_item = p.clients * p.tasks * p.float_bits - p.groups * p.int_bits
    return per_item * p.stored_per_round * (p.clients + n_servers - 1)


# ---------------------------------------------------------------------------
# committee collusion probability


def _binom_pmf(n: int, k: int, p: float) -> float:
    return math.comb(n, k) * p**k * (1.0 - p) ** (n - k)


def collusion_safety_prob(n_servers: int, p_compromise: float) -> float:
    """P(at most floor((s-1)/3) of s servers compromised), each independently
    compromised with probability p."""
    if not 0.0 <= p_compromise <= 1.0:
        raise ValueError("p_compromise must be a probability")
    limit = (n_servers - 1) // 3
    return sum(_binom_pmf(n_servers, k, p_compromise) for k in range(limit + 1))


def collusion_attack_prob(n_servers: int, p_compromise: float) -> float:
    """P(at least ceil(2s/3) servers compromised): enough to meet the
    commit-vote threshold and control aggregation."""
    if not 0.0 <= p_compromise <= 1.0:
        raise ValueError("p_compromise must be a probability")
    need = math.ceil(2 * n_servers / 3)
    return sum(_binom_pmf(n_servers, k, p_compromise) for k in range(need, n_servers + 1))


# ---------------------------------------------------------------------------
# latency decomposition


def p2p_latency_s(payload_bytes: float, lp: LatencyParams) -> float:
    return payload_bytes / lp.p2p_rate_bytes_per_s


def broadcast_latency_s(broadcast_payload_bits: float, lp: LatencyParams,
                        fanout_factor: float = 1.0) -> float:
    """Parametric broadcast latency: payload over the p2p rate scaled by a
    configurable fan-out factor."""
    return (broadcast_payload_bits / 8.0) / lp.p2p_rate_bytes_per_s * fanout_factor


def latency_round_s(lp: LatencyParams) -> float:
    return (lp.train_s + lp.p2p_s + lp.agg_s + lp.block_s
            + lp.broadcast_s + lp.knowledge_search_s)


def latency_total(lp: LatencyParams, rounds_per_task: int) -> float:
    """Per-task latency: R times the sum of the per-round components."""
    if rounds_per_task < 0:
        raise ValueError("rounds_per_task must be >= 0")
    return rounds_per_task * latency_round_s(lp)
