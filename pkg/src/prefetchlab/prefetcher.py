"""Prefetch policies: the learned delta-model pipeline and the traditional
baselines (lookahead, random readahead, naive most-frequent-delta), plus a
lookahead oracle upper bound and the no-prefetch policy.

Decisions carry logical-block candidates; the simulator expands them to
native blocks and enforces the native-block budget. Policies must respect
the budget themselves (budget law).
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import address
from .address import LogicalLBA, OutOfRangeError, TableDelta, to_logical
from .model import (ContextWindow, PredictionModel, ThresholdState,
                    TrainConfig, adapt_threshold, bucket_midpoint, fine_tune)
from .pipeline import ContextBuilder
from .trace import QueryRecord, TableCatalog
from .vocab import (DeltaVocabulary, TableDeltaLookup, decode_top_deltas,
                    encode_bi_delta, lookup_filter, refresh_vocab)


@dataclass
class PrefetchDecision:
    candidates: List[LogicalLBA] = field(default_factory=list)
    coalesced_ranges: List[Tuple[int, int, int]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.candidates


def coalesce(candidates: Sequence[LogicalLBA]) -> List[Tuple[int, int, int]]:
    """Maximal contiguous (table, start, length) runs covering the candidates."""
    per_table: Dict[int, List[int]] = {}
    for c in candidates:
        per_table.setdefault(c.table_id, []).append(c.logical_no)
    ranges = []
    for t in sorted(per_table):
        nos = sorted(set(per_table[t]))
        start = nos[0]
        prev = nos[0]
        for n in nos[1:]:
            if n == prev + 1:
                prev = n
                continue
            ranges.append((t, start, prev - start + 1))
            start = prev = n
        ranges.append((t, start, prev - start + 1))
    return ranges


def native_span(catalog: TableCatalog, lba: LogicalLBA) -> int:
    """Native blocks covered by one logical block (short at table end)."""
    lb = catalog.lb_size
    total = catalog.tables[lba.table_id].block_count
    return max(0, min(lb, total - lba.logical_no * lb))


def _budget_truncate(catalog: TableCatalog, candidates: List[LogicalLBA],
                     budget_native: int) -> List[LogicalLBA]:
    out, used, seen = [], 0, set()
    for c in candidates:
        if c in seen:
            continue
        span = native_span(catalog, c)
        if used + span > budget_native:
            break
        seen.add(c)
        out.append(c)
        used += span
    return out


def make_decision(catalog: TableCatalog, candidates: List[LogicalLBA],
                  budget_native: int) -> PrefetchDecision:
    kept = _budget_truncate(catalog, candidates, budget_native)
    return PrefetchDecision(candidates=kept, coalesced_ranges=coalesce(kept))


class Policy:
    """One instance per simulation run; observe/decide strictly alternate."""

    needs_lookahead = False
    next_query: Optional[QueryRecord] = None

    def observe(self, q: QueryRecord) -> None:
        raise NotImplementedError

    def decide(self, budget_native: int) -> PrefetchDecision:
        raise NotImplementedError


class NoPrefetchPolicy(Policy):
    def observe(self, q: QueryRecord) -> None:
        pass

    def decide(self, budget_native: int) -> PrefetchDecision:
        return PrefetchDecision()


class LookaheadPolicy(Policy):
    """Sequentially fetch the k logical blocks after the last accessed LBA."""

    def __init__(self, catalog: TableCatalog, k: int):
        self.catalog = catalog
        self.k = k
        self.last: Optional[LogicalLBA] = None

    def observe(self, q: QueryRecord) -> None:
        if q.result_blocks:
            self.last = to_logical(q.result_blocks[-1], self.catalog.lb_size)

    def decide(self, budget_native: int) -> PrefetchDecision:
        if self.last is None or self.k <= 0:
            return PrefetchDecision()
        limit = self.catalog.logical_count(self.last.table_id)
        cands = [LogicalLBA(self.last.table_id, n)
                 for n in range(self.last.logical_no + 1,
                                min(self.last.logical_no + 1 + self.k, limit))]
        return make_decision(self.catalog, cands, budget_native)


class NaivePolicy(Policy):
    """Repeatedly add the most frequent historical delta to the last LBA."""

    def __init__(self, catalog: TableCatalog, k: int, strategy: str = "min"):
        self.catalog = catalog
        self.k = k
        self.strategy = strategy
        self.freq: Counter = Counter()
        self.prev: Optional[Set[LogicalLBA]] = None
        self.last: Optional[LogicalLBA] = None

    def observe(self, q: QueryRecord) -> None:
        cur = {to_logical(b, self.catalog.lb_size) for b in q.result_blocks}
        if self.prev and cur:
            dset = address.delta_set(self.prev, cur, self.strategy)
            for off in dset.offsets():
                self.freq[off] += 1
        if q.result_blocks:
            self.last = to_logical(q.result_blocks[-1], self.catalog.lb_size)
        if cur:
            self.prev = cur

    def decide(self, budget_native: int) -> PrefetchDecision:
        if self.last is None or not self.freq or self.k <= 0:
            return PrefetchDecision()
        best = min(self.freq, key=lambda off: (-self.freq[off], abs(off)))
        if best == 0:
            return PrefetchDecision()
        limit = self.catalog.logical_count(self.last.table_id)
        cands = []
        for j in range(1, self.k + 1):
            n = self.last.logical_no + j * best
            if 0 <= n < limit:
                cands.append(LogicalLBA(self.last.table_id, n))
        return make_decision(self.catalog, cands, budget_native)


class RandRPolicy(Policy):
    """Fetch a whole extent once enough of its blocks appear in the recent
    access window (InnoDB-style random read-ahead)."""

    def __init__(self, catalog: TableCatalog, extent_size: int = 64,
                 l_rr: int = 13, window: int = 1024):
        self.catalog = catalog
        self.extent_size = extent_size
        self.l_rr = l_rr
        self.window = window
        self._trace: deque = deque()
        self._in_window: Counter = Counter()
        self._emitted: Dict[Tuple[int, int], Set[int]] = {}

    def _extent(self, lba: LogicalLBA) -> Tuple[int, int]:
        return (lba.table_id, lba.logical_no // self.extent_size)

    def observe(self, q: QueryRecord) -> None:
        for b in q.result_blocks:
            lba = to_logical(b, self.catalog.lb_size)
            self._trace.append(lba)
            self._in_window[lba] += 1
            while len(self._trace) > self.window:
                old = self._trace.popleft()
                self._in_window[old] -= 1
                if self._in_window[old] == 0:
                    del self._in_window[old]
                    ext = self._extent(old)
                    if not any(self._extent(x) == ext for x in self._in_window):
                        self._emitted.pop(ext, None)

    def decide(self, budget_native: int) -> PrefetchDecision:
        distinct: Dict[Tuple[int, int], Set[int]] = {}
        for lba in self._in_window:
            distinct.setdefault(self._extent(lba), set()).add(lba.logical_no)
        cands: List[LogicalLBA] = []
        for ext, blocks in sorted(distinct.items()):
            if len(blocks) < self.l_rr:
                continue
            t, e = ext
            done = self._emitted.setdefault(ext, set())
            limit = self.catalog.logical_count(t)
            lo = e * self.extent_size
            hi = min(lo + self.extent_size, limit)
            for n in range(lo, hi):
                if n not in done:
                    cands.append(LogicalLBA(t, n))
                    done.add(n)
        return make_decision(self.catalog, cands, budget_native)


class OraclePolicy(Policy):
    """Upper bound: prefetches exactly the next query's blocks."""

    needs_lookahead = True

    def __init__(self, catalog: TableCatalog):
        self.catalog = catalog

    def observe(self, q: QueryRecord) -> None:
        pass

    def decide(self, budget_native: int) -> PrefetchDecision:
        if self.next_query is None:
            return PrefetchDecision()
        seen = set()
        cands = []
        for b in self.next_query.result_blocks:
            lba = to_logical(b, self.catalog.lb_size)
            if lba not in seen:
                seen.add(lba)
                cands.append(lba)
        return make_decision(self.catalog, cands, budget_native)


# ---------------------------------------------------------------------------
# the learned policy

@dataclass
class GraspConfig:
    k: int = 50
    k_dc: int = 25
    budget_units: str = "x128"  # "x128": budget = k*128 native; "blocks": k
    tau0: float = 0.1
    tau_alpha: float = 0.1
    tau_variant: str = "recall-max"
    strategy: str = "min"
    l_tune: int = 200
    lookup_window: int = 2000
    lookup_min_count: int = 2

    @property
    def budget_native(self) -> int:
        return self.k * 128 if self.budget_units == "x128" else self.k


class GraspPolicy(Policy):
    """Full decision pipeline over the trained multi-task model."""

    def __init__(self, builder: ContextBuilder, model: PredictionModel,
                 vocab: DeltaVocabulary, cfg: GraspConfig,
                 train_cfg: Optional[TrainConfig] = None,
                 tuning_enabled: bool = True):
        self.builder = builder
        self.catalog = builder.catalog
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.train_cfg = train_cfg or TrainConfig()
        self.tuning_enabled = tuning_enabled
        self.lookup = TableDeltaLookup(cfg.lookup_window, cfg.lookup_min_count)
        self.threshold = ThresholdState(tau=cfg.tau0, alpha=cfg.tau_alpha,
                                        variant=cfg.tau_variant)
        self.window = ContextWindow(builder.cfg)
        self.prev_logical: Optional[Set[LogicalLBA]] = None
        self.last_table_probs: Optional[np.ndarray] = None
        self.observed = 0
        self.recent_raw: deque = deque(maxlen=max(2 * cfg.l_tune, 64))
        self.tune_events: List[dict] = []

    # -- observation ----------------------------------------------------

    def observe(self, q: QueryRecord) -> None:
        raw, dset = self.builder.raw_context(q, self.prev_logical)
        if dset is not None:
            self.lookup.observe(dset.members)
        if self.last_table_probs is not None and any(q.accessed_tables):
            self.threshold = adapt_threshold(
                self.threshold, self.last_table_probs, q.accessed_tables)
        self.window.push(self.builder.encode_context(raw, self.vocab))
        self.recent_raw.append(raw)
        cur = self.builder.logical_set(q)
        if cur:
            self.prev_logical = cur
        self.observed += 1

    # -- decision pipeline ----------------------------------------------

    def decide(self, budget_native: int) -> PrefetchDecision:
        if self.observed == 0 or not self.prev_logical:
            return PrefetchDecision()
        table_probs, count_probs, delta_probs = self.model.predict(self.window)
        self.last_table_probs = table_probs
        tables = [t for t, p in enumerate(table_probs)
                  if p >= self.threshold.tau]
        n = bucket_midpoint(int(np.argmax(count_probs))) * self.cfg.k_dc
        offsets = decode_top_deltas(delta_probs, n, self.vocab)
        # skip entirely when the default class dominates every real class
        assigned = [i for i, off in enumerate(self.vocab.slots)
                    if i != self.vocab.default_class_index and off is not None]
        if (not tables or n <= 0 or not offsets or not assigned or
                delta_probs[self.vocab.default_class_index]
                > max(delta_probs[i] for i in assigned)):
            return PrefetchDecision()
        cands_d = [TableDelta(t, off) for t in tables for off in offsets]
        cands_d = lookup_filter(cands_d, self.lookup)
        ref = address.reference_lba(self.prev_logical, self.cfg.strategy)
        logical_counts = self.catalog.logical_counts()
        scored = []
        class_prob = {off: float(delta_probs[self.vocab.class_of(off)])
                      for off in offsets}
        for d in cands_d:
            try:
                lba = address.apply_delta(ref, d, logical_counts)
            except OutOfRangeError:
                continue
            scored.append((-class_prob[d.offset],
                           -float(table_probs[d.target_table_id]), lba))
        scored.sort(key=lambda s: (s[0], s[1], s[2]))
        return make_decision(self.catalog,
                             [s[2] for s in scored],
                             min(budget_native, self.cfg.budget_native))

    # -- online tuning ---------------------------------------------------

    def tune(self) -> dict:
        """Vocabulary refresh, conditional head-only fine-tune, and encoder
        drift check; called by the simulator every l_tune queries."""
        if not self.tuning_enabled:
            return {}
        recent_sets = [r.offsets for r in self.recent_raw if r.offsets]
        new_vocab, remap = refresh_vocab(self.vocab, recent_sets)
        event = {"at": self.observed, "remap": remap,
                 "fine_tuned": False, "drift": []}
        self.vocab = new_vocab
        if remap:
            windows, targets = self._recent_dataset()
            fine_tune(self.model, windows, targets, remap, self.train_cfg)
            event["fine_tuned"] = True
        # re-encode the live window under the (possibly) refreshed vocabulary
        self._rebuild_window()
        for t in range(self.catalog.table_count):
            drift = self.builder.encoder.refresh_table(t)
            if drift is not None:
                event["drift"].append((t, drift))
        self.tune_events.append(event)
        return event

    def _recent_dataset(self):
        from .model import TrainTargets, count_bucket
        raws = list(self.recent_raw)
        cfg = self.builder.cfg
        contexts = [self.builder.encode_context(r, self.vocab) for r in raws]
        windows, tables, cbuckets, deltas = [], [], [], []
        for i in range(len(raws) - 1):
            win = ContextWindow(cfg)
            for j in range(max(0, i - cfg.lookback + 1), i + 1):
                win.push(contexts[j])
            windows.append(win)
            nxt = raws[i + 1]
            tables.append(nxt.table_bitmap)
            cbuckets.append(count_bucket(len(nxt.offsets)))
            deltas.append(encode_bi_delta(nxt.offsets, self.vocab))
        targets = TrainTargets(
            tables=np.stack(tables) if tables else
            np.zeros((0, cfg.table_count)),
            count_buckets=np.asarray(cbuckets, dtype=np.int64),
            deltas=np.stack(deltas) if deltas else
            np.zeros((0, cfg.num_delta_classes)),
        )
        return windows, targets

    def _rebuild_window(self) -> None:
        cfg = self.builder.cfg
        fresh = ContextWindow(cfg)
        for raw in list(self.recent_raw)[-cfg.lookback:]:
            fresh.push(self.builder.encode_context(raw, self.vocab))
        self.window = fresh
