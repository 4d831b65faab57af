"""Wiring from workload traces to model inputs.

Builds per-query contexts (result encodings, statement representation,
binary delta vector, count one-hot, min-reference table), assembles training
windows/targets, and computes the unique-delta labeling study used in
training reports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from . import address
from .address import DeltaSet, LogicalLBA, to_logical
from .encoding import BlockEncoder, statement_repr, statement_repr_len
from .model import (ContextWindow, ModelConfig, QueryContext, TrainTargets,
                    count_bucket, count_onehot)
from .trace import QueryRecord, Workload
from .vocab import DeltaVocabulary, encode_bi_delta


@dataclass
class RawContext:
    """Vocabulary-independent pieces of one query's context, kept so a
    context can be re-encoded after a vocabulary refresh."""

    result_enc: np.ndarray
    stmt: np.ndarray
    offsets: frozenset         # bare delta offsets vs previous query
    min_table_id: Optional[int]  # table of the reference LBA, None pre-warmup
    table_bitmap: np.ndarray


class ContextBuilder:
    """Turns a query stream into model contexts against a fixed encoder."""

    def __init__(self, encoder: BlockEncoder, cfg: ModelConfig,
                 strategy: str = "min"):
        self.encoder = encoder
        self.cfg = cfg
        self.strategy = strategy
        self.catalog = encoder.catalog

    def logical_set(self, q: QueryRecord) -> Set[LogicalLBA]:
        return {to_logical(b, self.catalog.lb_size) for b in q.result_blocks}

    def raw_context(self, q: QueryRecord,
                    prev_logical: Optional[Set[LogicalLBA]]
                    ) -> Tuple[RawContext, Optional[DeltaSet]]:
        dset = None
        offsets: frozenset = frozenset()
        min_table = None
        cur = self.logical_set(q)
        if prev_logical:
            dset = address.delta_set(prev_logical, cur, self.strategy)
            offsets = frozenset(dset.offsets())
            min_table = dset.reference.table_id
        raw = RawContext(
            result_enc=self.encoder.query_result_encoding(q.result_blocks),
            stmt=statement_repr(q, self.catalog.table_count).astype(np.float32),
            offsets=offsets,
            min_table_id=min_table,
            table_bitmap=np.asarray(q.accessed_tables, dtype=np.float32),
        )
        return raw, dset

    def encode_context(self, raw: RawContext,
                       vocab: DeltaVocabulary) -> QueryContext:
        mtb = np.zeros(self.cfg.table_count, dtype=np.float32)
        if raw.min_table_id is not None:
            mtb[raw.min_table_id] = 1.0
        return QueryContext(
            result_enc=raw.result_enc,
            stmt=raw.stmt,
            bi_delta=encode_bi_delta(raw.offsets, vocab),
            count_onehot=count_onehot(len(raw.offsets)),
            min_table_onehot=mtb,
        )


def make_model_config(encoder: BlockEncoder, vocab: DeltaVocabulary,
                      lookback: int = 2, **overrides) -> ModelConfig:
    return ModelConfig(
        table_count=encoder.catalog.table_count,
        enc_dim=encoder.enc_dim,
        stmt_dim=statement_repr_len(encoder.catalog.table_count),
        num_delta_classes=vocab.num_classes,
        lookback=lookback,
        **overrides,
    )


def collect_delta_sets(w: Workload, strategy: str = "min"
                       ) -> List[frozenset]:
    """Bare offset sets for each query pair in the trace (skips pairs whose
    previous query touched nothing)."""
    out = []
    prev: Optional[Set[LogicalLBA]] = None
    for q in w.queries:
        cur = {to_logical(b, w.catalog.lb_size) for b in q.result_blocks}
        if prev:
            out.append(frozenset(
                address.delta_set(prev, cur, strategy).offsets()))
        if cur:
            prev = cur
    return out


def build_dataset(w: Workload, builder: ContextBuilder,
                  vocab: DeltaVocabulary
                  ) -> Tuple[List[ContextWindow], TrainTargets]:
    """Supervised pairs: window of contexts up to query i, targets from
    query i+1 (table bitmap, delta-count bucket, bi_delta)."""
    cfg = builder.cfg
    raws: List[RawContext] = []
    prev: Optional[Set[LogicalLBA]] = None
    for q in w.queries:
        raw, _ = builder.raw_context(q, prev)
        raws.append(raw)
        cur = builder.logical_set(q)
        if cur:
            prev = cur
    contexts = [builder.encode_context(r, vocab) for r in raws]
    windows: List[ContextWindow] = []
    tables, cbuckets, deltas = [], [], []
    for i in range(len(raws) - 1):
        win = ContextWindow(cfg)
        for j in range(max(0, i - cfg.lookback + 1), i + 1):
            win.push(contexts[j])
        windows.append(win)
        nxt = raws[i + 1]
        tables.append(nxt.table_bitmap)
        cbuckets.append(count_bucket(len(nxt.offsets)))
        deltas.append(encode_bi_delta(nxt.offsets, vocab))
    targets = TrainTargets(
        tables=np.stack(tables) if tables else np.zeros((0, cfg.table_count)),
        count_buckets=np.asarray(cbuckets, dtype=np.int64),
        deltas=np.stack(deltas) if deltas else
        np.zeros((0, cfg.num_delta_classes)),
    )
    return windows, targets


# ---------------------------------------------------------------------------
# labeling study for the training report

def _flat_lba(w: Workload, b) -> int:
    base = 0
    for t in range(b.table_id):
        base += w.catalog.tables[t].block_count
    return base + b.block_no


def _flat_logical(w: Workload, b) -> int:
    """Single-namespace logical address: tables laid out back to back."""
    base = 0
    for t in range(b.table_id):
        base += -(-w.catalog.tables[t].block_count // w.catalog.lb_size)
    return base + b.block_no // w.catalog.lb_size


def unique_delta_study(w: Workload) -> Dict[str, int]:
    """Unique-delta counts with order-agnostic (min-reference) delta sets
    under flat single-namespace labeling vs table-based labeling, the latter
    for all three reference strategies. Also reports the unique count of
    plain consecutive differences over the flat access sequence."""
    flat_sets: List[Set[int]] = []
    prev_flat: Optional[Set[int]] = None
    flat_seq: List[int] = []
    for q in w.queries:
        cur = {_flat_logical(w, b) for b in q.result_blocks}
        flat_seq.extend(sorted(_flat_logical(w, b) for b in q.result_blocks))
        if prev_flat:
            ref = min(prev_flat)
            flat_sets.append({x - ref for x in cur})
        if cur:
            prev_flat = cur
    flat_unique = set()
    for s in flat_sets:
        flat_unique |= s
    out = {
        "consecutive": len(flat_unique),
        "eq1_sequence": len(set(address.consecutive_deltas(flat_seq))),
    }
    for strategy in ("min", "median", "max"):
        offsets = set()
        for s in collect_delta_sets(w, strategy):
            offsets |= s
        out[strategy] = len(offsets)
    return out
