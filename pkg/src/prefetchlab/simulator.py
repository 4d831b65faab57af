"""Trace-driven block cache simulation.

The cache holds native blocks under LRU eviction. Prefetching is
non-blocking: after each query the policy's candidates are fetched in order
against the remaining interarrival gap and abandoned mid-list once the gap
is exhausted. Metrics follow the standard hit-ratio / one-step recall /
miss-coverage / relative-I/O definitions, with miss coverage and relative
I/O computed against a paired no-prefetch run.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .address import LogicalLBA, TableLBA
from .prefetcher import Policy, PrefetchDecision
from .trace import TableCatalog, Workload


@dataclass
class CostModel:
    t_miss_ms: float = 1.0
    t_hit_ms: float = 0.01
    sequential_discount: float = 0.5

    def __post_init__(self):
        if not (self.t_miss_ms > self.t_hit_ms >= 0):
            raise ValueError("need t_miss > t_hit >= 0")
        if not (0 < self.sequential_discount <= 1):
            raise ValueError("sequential discount must be in (0,1]")


@dataclass
class ArrivalModel:
    d_ms: float = 250.0
    mode: str = "fixed"  # or "skewed"

    def __post_init__(self):
        if self.mode not in ("fixed", "skewed"):
            raise ValueError(f"unknown arrival mode {self.mode!r}")
        if self.d_ms <= 0:
            raise ValueError("d must be positive")


def sample_interarrival(am: ArrivalModel, rng: np.random.Generator) -> float:
    """Fixed: exactly d. Skewed: d*(0.5 + 0.5*max of three uniforms), which
    has support [d/2, d] and mean 7d/8."""
    if am.mode == "fixed":
        return am.d_ms
    u = rng.random(3)
    return am.d_ms * (0.5 + 0.5 * float(u.max()))


@dataclass
class RunMetrics:
    policy: str = ""
    hits: int = 0
    misses: int = 0
    accessed_blocks: int = 0
    correct_prefetches: int = 0
    misses_np: Optional[int] = None
    io_time_ms: float = 0.0
    io_time_np_ms: Optional[float] = None
    prefetch_time_ms: float = 0.0
    exec_time_ms: float = 0.0
    idle_time_ms: float = 0.0
    prefetched_blocks: int = 0
    per_query_latency_ms: List[float] = field(default_factory=list)
    per_query_hits: List[int] = field(default_factory=list)
    per_query_misses: List[int] = field(default_factory=list)
    query_types: List[str] = field(default_factory=list)

    def p95_latency(self) -> Dict[str, float]:
        """95th percentile latency per query type."""
        out = {}
        by_type: Dict[str, List[float]] = {}
        for t, lat in zip(self.query_types, self.per_query_latency_ms):
            by_type.setdefault(t, []).append(lat)
        for t, lats in by_type.items():
            out[t] = float(np.percentile(lats, 95))
        return out


def hit_ratio(m: RunMetrics) -> Optional[float]:
    total = m.hits + m.misses
    return m.hits / total if total else None


def recall(m: RunMetrics) -> Optional[float]:
    return (m.correct_prefetches / m.accessed_blocks
            if m.accessed_blocks else None)


def miss_coverage(m: RunMetrics, np_run: RunMetrics) -> Optional[float]:
    if not np_run.misses:
        return None
    return (np_run.misses - m.misses) / np_run.misses


def relative_io(m: RunMetrics, np_run: RunMetrics) -> Optional[float]:
    if np_run.io_time_ms <= 0:
        return None
    return m.io_time_ms / np_run.io_time_ms


class LRUCache:
    """Native-granularity LRU cache; each resident block carries an origin
    tag and the decision index it was prefetched for."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._blocks: "OrderedDict[TableLBA, Tuple[str, int]]" = OrderedDict()

    def __contains__(self, block: TableLBA) -> bool:
        return block in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def tag(self, block: TableLBA) -> Optional[Tuple[str, int]]:
        return self._blocks.get(block)

    def touch(self, block: TableLBA) -> None:
        self._blocks.move_to_end(block)

    def retag_demand(self, block: TableLBA) -> None:
        self._blocks[block] = ("demand", -1)

    def insert(self, block: TableLBA, origin: str, decision: int = -1) -> None:
        if block in self._blocks:
            self._blocks.move_to_end(block)
            self._blocks[block] = (origin, decision)
            return
        if len(self._blocks) >= self.capacity:
            self._blocks.popitem(last=False)
        self._blocks[block] = (origin, decision)


@dataclass
class SimConfig:
    cache_blocks: int = 4096
    budget_native: int = 50 * 128
    l_tune: int = 0          # 0 disables the tuning hook
    seed: int = 0


def _native_blocks(catalog: TableCatalog, lba: LogicalLBA) -> List[TableLBA]:
    lb = catalog.lb_size
    total = catalog.tables[lba.table_id].block_count
    lo = lba.logical_no * lb
    return [TableLBA(lba.table_id, n) for n in range(lo, min(lo + lb, total))]


def run(w: Workload, policy: Policy, sim: SimConfig,
        cost: CostModel = CostModel(),
        arrival: ArrivalModel = ArrivalModel(),
        warmup_queries: int = 0) -> RunMetrics:
    """Simulate one policy over the workload. The caller pairs this with an
    NP run (same seed) to fill misses_np / io_time_np_ms.

    Queries before `warmup_queries` are simulated fully (cache, policy
    state, tuning) but excluded from the metrics.
    """
    cache = LRUCache(sim.cache_blocks)
    rng = np.random.default_rng(sim.seed)
    m = RunMetrics(policy=type(policy).__name__)

    for i, q in enumerate(w.queries):
        counted = i >= warmup_queries
        # 1. demand accesses
        latency = 0.0
        q_hits = q_misses = 0
        for b in q.result_blocks:
            tag = cache.tag(b)
            if tag is not None:
                q_hits += 1
                latency += cost.t_hit_ms
                origin, decision = tag
                if origin == "prefetch":
                    if decision == i and counted:
                        m.correct_prefetches += 1
                    cache.retag_demand(b)
                cache.touch(b)
            else:
                q_misses += 1
                latency += cost.t_miss_ms
                cache.insert(b, "demand")
        if counted:
            m.accessed_blocks += len(q.result_blocks)
            m.hits += q_hits
            m.misses += q_misses
            m.io_time_ms += latency
            m.exec_time_ms += latency
            m.per_query_latency_ms.append(latency)
            m.per_query_hits.append(q_hits)
            m.per_query_misses.append(q_misses)
            m.query_types.append(q.query_type)

        # 2. observation
        policy.observe(q)

        # tuning hook
        if sim.l_tune > 0 and (i + 1) % sim.l_tune == 0 \
                and hasattr(policy, "tune"):
            policy.tune()

        # 3. decision + non-blocking prefetch within the interarrival gap
        gap = sample_interarrival(arrival, rng)
        if policy.needs_lookahead:
            policy.next_query = w.queries[i + 1] if i + 1 < len(w.queries) \
                else None
        decision = policy.decide(sim.budget_native)
        _check_budget(w.catalog, decision, sim.budget_native)
        spent = 0.0
        prev_native: Optional[TableLBA] = None
        for lba in decision.candidates:
            for nb in _native_blocks(w.catalog, lba):
                if nb in cache:
                    prev_native = nb
                    continue
                contiguous = (prev_native is not None
                              and nb.table_id == prev_native.table_id
                              and nb.block_no == prev_native.block_no + 1)
                charge = cost.t_miss_ms * (cost.sequential_discount
                                           if contiguous else 1.0)
                if spent + charge > gap:
                    break
                spent += charge
                cache.insert(nb, "prefetch", decision=i + 1)
                if counted:
                    m.prefetched_blocks += 1
                prev_native = nb
            else:
                continue
            break
        if counted:
            m.prefetch_time_ms += spent
            m.idle_time_ms += max(0.0, gap - spent)

    return m


def _check_budget(catalog: TableCatalog, decision: PrefetchDecision,
                  budget: int) -> None:
    total = 0
    for lba in decision.candidates:
        total += len(_native_blocks(catalog, lba))
    if total > budget:
        raise RuntimeError(
            f"policy exceeded prefetch budget: {total} > {budget}")


def run_paired(w: Workload, policy: Policy, sim: SimConfig,
               cost: CostModel = CostModel(),
               arrival: ArrivalModel = ArrivalModel(),
               warmup_queries: int = 0) -> Tuple[RunMetrics, RunMetrics]:
    """Run the no-prefetch baseline and the policy with identical seeds;
    fills the NP-derived fields of the policy metrics."""
    from .prefetcher import NoPrefetchPolicy
    np_metrics = run(w, NoPrefetchPolicy(), sim, cost, arrival,
                     warmup_queries=warmup_queries)
    metrics = run(w, policy, sim, cost, arrival,
                  warmup_queries=warmup_queries)
    metrics.misses_np = np_metrics.misses
    metrics.io_time_np_ms = np_metrics.io_time_ms
    return metrics, np_metrics
