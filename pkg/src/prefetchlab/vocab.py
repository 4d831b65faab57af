"""Frequent-delta vocabulary, binary delta encoding, and the per-table
frequent-delta lookup filter.

The vocabulary maps each of the top `ds` offsets to a class index. Class
layout: indices [0, ds) are the active slots, index ds is the default class
for out-of-vocabulary offsets, and [ds+1, 2ds+1) are void slots that start
unassigned and pick up newly frequent offsets on refresh without resizing
the model output.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .address import TableDelta


def _rank_key(freq: Counter):
    # higher frequency first; ties by smaller |offset|, then + before -
    def key(off: int):
        return (-freq[off], abs(off), 0 if off >= 0 else 1)
    return key


@dataclass
class DeltaVocabulary:
    ds: int
    slots: List[Optional[int]] = field(default_factory=list)  # length 2*ds+1
    freq: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if self.ds < 1:
            raise ValueError("ds must be >= 1")
        if not self.slots:
            self.slots = [None] * (2 * self.ds + 1)
        assert len(self.slots) == 2 * self.ds + 1
        self.slots[self.ds] = None  # default class never carries an offset

    # -- layout helpers --------------------------------------------------

    @property
    def default_class_index(self) -> int:
        return self.ds

    @property
    def num_classes(self) -> int:
        return 2 * self.ds + 1

    @property
    def deltas(self) -> List[Optional[int]]:
        """Active-slot offsets (position = class index)."""
        return self.slots[: self.ds]

    def class_of(self, offset: int) -> Optional[int]:
        for i, off in enumerate(self.slots):
            if i != self.ds and off == offset:
                return i
        return None

    def assigned_offsets(self) -> Set[int]:
        return {off for i, off in enumerate(self.slots)
                if i != self.ds and off is not None}

    def _index_map(self) -> Dict[int, int]:
        return {off: i for i, off in enumerate(self.slots)
                if i != self.ds and off is not None}

    # -- persistence -----------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, off in enumerate(self.slots):
                if i == self.ds:
                    state, off_s = "default", "-"
                elif off is None:
                    state = "unassigned" if i < self.ds else "void"
                    off_s = "-"
                else:
                    state = "active" if i < self.ds else "void"
                    off_s = str(off)
                freq = self.freq[off] if off is not None else 0
                f.write(f"{i} {off_s} {freq} {state}\n")

    @classmethod
    def load(cls, path: str) -> "DeltaVocabulary":
        slots: List[Optional[int]] = []
        freq: Counter = Counter()
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                _idx, off_s, freq_s, _state = line.split()
                off = None if off_s == "-" else int(off_s)
                slots.append(off)
                if off is not None:
                    freq[off] = int(freq_s)
        ds = (len(slots) - 1) // 2
        return cls(ds=ds, slots=slots, freq=freq)


def build_vocab(delta_sets: Iterable[Iterable[int]], ds: int) -> DeltaVocabulary:
    """Rank bare offsets (table ids stripped) by frequency; top ds become the
    active classes. Short streams leave trailing active slots unassigned."""
    freq: Counter = Counter()
    for s in delta_sets:
        for off in set(s):
            freq[off] += 1
    ranked = sorted(freq, key=_rank_key(freq))
    v = DeltaVocabulary(ds=ds)
    for i, off in enumerate(ranked[:ds]):
        v.slots[i] = off
    v.freq = freq.copy()
    return v


def encode_bi_delta(delta_q: Iterable[int], v: DeltaVocabulary) -> np.ndarray:
    """Binary indicator over vocabulary classes.

    The default bit is set whenever any member of delta_q is outside the
    vocabulary; an empty delta_q yields the all-zero vector.
    """
    bits = np.zeros(v.num_classes, dtype=np.float32)
    index = v._index_map()
    for off in set(delta_q):
        i = index.get(off)
        if i is None:
            bits[v.default_class_index] = 1.0
        else:
            bits[i] = 1.0
    return bits


def decode_top_deltas(delta_probs: Sequence[float], n: int,
                      v: DeltaVocabulary) -> List[int]:
    """Top-n assigned-class offsets by probability, descending.

    Default and unassigned classes are never decoded; ties break by class
    index. n larger than the assigned classes clamps.
    """
    if n <= 0:
        return []
    probs = np.asarray(delta_probs)
    candidates = [(i, off) for i, off in enumerate(v.slots)
                  if i != v.default_class_index and off is not None]
    candidates.sort(key=lambda c: (-probs[c[0]], c[0]))
    return [off for _i, off in candidates[:n]]


def refresh_vocab(v: DeltaVocabulary, recent_delta_sets: Iterable[Iterable[int]]
                  ) -> Tuple[DeltaVocabulary, List[Tuple[int, Optional[int], int]]]:
    """Recompute the top-ds offsets over a recent window.

    Offsets already assigned keep their class indices. New offsets fill
    unassigned slots first (active, then void), then evict the lowest
    recent-frequency assigned classes outside the new top set. Returns the
    refreshed vocabulary and a remap of (class index, old offset, new offset)
    so the model knows which output heads changed.
    """
    recent: Counter = Counter()
    for s in recent_delta_sets:
        for off in set(s):
            recent[off] += 1
    ranked = sorted(recent, key=_rank_key(recent))
    top = ranked[: v.ds]
    new = DeltaVocabulary(ds=v.ds, slots=list(v.slots),
                          freq=v.freq + recent)
    assigned = new.assigned_offsets()
    incoming = [off for off in top if off not in assigned]
    remap: List[Tuple[int, Optional[int], int]] = []
    free = [i for i in range(new.num_classes)
            if i != new.default_class_index and new.slots[i] is None]
    top_set = set(top)
    evictable = sorted(
        (i for i in range(new.num_classes)
         if i != new.default_class_index and new.slots[i] is not None
         and new.slots[i] not in top_set),
        key=lambda i: (recent[new.slots[i]], i))
    for off in incoming:
        if free:
            i = free.pop(0)
        elif evictable:
            i = evictable.pop(0)
        else:
            break
        remap.append((i, new.slots[i], off))
        new.slots[i] = off
    return new, remap


class TableDeltaLookup:
    """Per-table sliding-window counts of observed (table, offset) deltas."""

    def __init__(self, window: int = 2000, min_count: int = 2):
        self.window = window
        self.min_count = min_count
        self._history: deque = deque()
        self._counts: Counter = Counter()

    def observe(self, deltas: Iterable[TableDelta]) -> None:
        items = [(d.target_table_id, d.offset) for d in set(deltas)]
        self._history.append(items)
        for key in items:
            self._counts[key] += 1
        while len(self._history) > self.window:
            for key in self._history.popleft():
                self._counts[key] -= 1

    def count(self, table_id: int, offset: int) -> int:
        return self._counts[(table_id, offset)]


def lookup_filter(candidates: List[TableDelta],
                  lk: TableDeltaLookup) -> List[TableDelta]:
    """Keep only candidates seen at least min_count times; order preserved."""
    if lk.min_count <= 0:
        return list(candidates)
    return [d for d in candidates
            if lk.count(d.target_table_id, d.offset) >= lk.min_count]
