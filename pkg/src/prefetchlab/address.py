"""Two-level block addressing and delta arithmetic.

Addresses are (table_id, block_no) pairs. For prediction purposes native
blocks are grouped into logical blocks of ``lb_size`` consecutive native
blocks; all delta math happens in logical-block units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Set


class NoReferenceError(ValueError):
    """Raised when a reference LBA is requested from an empty set."""


class OutOfRangeError(ValueError):
    """Raised when applying a delta produces an address outside the catalog."""


@dataclass(frozen=True, order=True)
class TableLBA:
    """Native block address: (table id, block number within that table)."""

    table_id: int
    block_no: int

    def __post_init__(self):
        if self.table_id < 0 or self.block_no < 0:
            raise ValueError(f"negative address component: {self}")


@dataclass(frozen=True, order=True)
class LogicalLBA:
    """Logical block address after grouping lb_size native blocks."""

    table_id: int
    logical_no: int

    def __post_init__(self):
        if self.table_id < 0 or self.logical_no < 0:
            raise ValueError(f"negative address component: {self}")


@dataclass(frozen=True, order=True)
class TableDelta:
    """Signed logical-block offset targeting a specific table."""

    target_table_id: int
    offset: int


@dataclass(frozen=True)
class DeltaSet:
    """Order-agnostic delta set of one query relative to a reference LBA."""

    reference: LogicalLBA
    members: frozenset  # of TableDelta

    def offsets(self) -> Set[int]:
        """Bare offsets with table ids stripped."""
        return {d.offset for d in self.members}


def to_logical(addr: TableLBA, lb_size: int) -> LogicalLBA:
    """Group native blocks into logical blocks of lb_size."""
    if lb_size < 1:
        raise ValueError(f"lb_size must be >= 1, got {lb_size}")
    return LogicalLBA(addr.table_id, addr.block_no // lb_size)


def consecutive_deltas(seq: Sequence[int]) -> List[int]:
    """Differences between each consecutive address in a flat sequence."""
    return [seq[i + 1] - seq[i] for i in range(len(seq) - 1)]


def reference_lba(prev: Iterable[LogicalLBA], strategy: str = "min") -> LogicalLBA:
    """Pick the reference LBA of the previous query's accessed set.

    Ordering across tables is lexicographic (table_id, logical_no).
    Median is the lower median of the sorted set.
    """
    items = sorted(set(prev))
    if not items:
        raise NoReferenceError("no reference available")
    if strategy == "min":
        return items[0]
    if strategy == "max":
        return items[-1]
    if strategy == "median":
        return items[(len(items) - 1) // 2]
    raise ValueError(f"unknown reference strategy: {strategy!r}")


def delta_set(
    prev: Iterable[LogicalLBA],
    cur: Iterable[LogicalLBA],
    strategy: str = "min",
) -> DeltaSet:
    """Order-agnostic delta set: every current LBA minus the reference.

    Offsets compare raw logical numbers across tables; the target table id
    rides along so the delta can be applied later.
    """
    ref = reference_lba(prev, strategy)
    members = frozenset(
        TableDelta(lba.table_id, lba.logical_no - ref.logical_no) for lba in cur
    )
    return DeltaSet(ref, members)


def apply_delta(reference: LogicalLBA, d: TableDelta,
                table_logical_counts: Sequence[int] | None = None) -> LogicalLBA:
    """Inverse of delta_set for one member: reference offset into the target table.

    If table_logical_counts is given, results outside [0, count) raise
    OutOfRangeError (callers usually drop such candidates silently).
    """
    logical_no = reference.logical_no + d.offset
    if logical_no < 0:
        raise OutOfRangeError(
            f"delta {d.offset} from {reference} yields negative address")
    if table_logical_counts is not None:
        if d.target_table_id >= len(table_logical_counts):
            raise OutOfRangeError(f"unknown table {d.target_table_id}")
        if logical_no >= table_logical_counts[d.target_table_id]:
            raise OutOfRangeError(
                f"logical {logical_no} beyond table {d.target_table_id}")
    return LogicalLBA(d.target_table_id, logical_no)


def reconstruct(ds: DeltaSet,
                table_logical_counts: Sequence[int] | None = None) -> Set[LogicalLBA]:
    """Rebuild the accessed-LBA set that produced a delta set."""
    return {apply_delta(ds.reference, d, table_logical_counts) for d in ds.members}
