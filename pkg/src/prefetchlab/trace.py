"""Workload trace model, file format, and the synthetic workload generator.

A workload is a table catalog plus an ordered query stream. Synthetic
workloads are built from per-session pattern programs (sequential scan,
strided scan, table hop, zipf point lookups, append inserts, in-place
updates) so that the same pattern seeds can be replayed against a scaled
catalog.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .address import TableLBA

QUERY_TYPES = ("select", "insert", "update", "delete")

PATTERNS = (
    "sequential-scan",
    "strided",
    "table-hop",
    "point-lookup",
    "insert-append",
    "update-inplace",
)


class TraceFormatError(ValueError):
    """Malformed trace file; message names the line and field."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "numeric" | "text"

    def __post_init__(self):
        if self.kind not in ("numeric", "text"):
            raise ValueError(f"unknown column kind {self.kind!r}")


@dataclass
class TableSpec:
    name: str
    block_count: int
    columns: List[ColumnSpec]


@dataclass
class TableCatalog:
    tables: List[TableSpec]
    lb_size: int = 32

    def __post_init__(self):
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise ValueError("duplicate table names in catalog")
        for t in self.tables:
            if t.block_count < 1:
                raise ValueError(f"table {t.name} has no blocks")

    @property
    def table_count(self) -> int:
        return len(self.tables)

    def table_index(self, name: str) -> int:
        for i, t in enumerate(self.tables):
            if t.name == name:
                return i
        raise KeyError(f"unknown table {name!r}")

    def logical_count(self, table_id: int) -> int:
        return -(-self.tables[table_id].block_count // self.lb_size)

    def logical_counts(self) -> List[int]:
        return [self.logical_count(t) for t in range(self.table_count)]


@dataclass
class QueryRecord:
    query_id: int
    arrival_offset_ms: float
    query_type: str
    accessed_tables: List[int]  # 0/1 bitmap, length |TB|
    join_text: List[str]        # per table
    filter_text: List[str]      # per table
    result_blocks: List[TableLBA]

    def __post_init__(self):
        if self.query_type not in QUERY_TYPES:
            raise ValueError(f"bad query type {self.query_type!r}")
        for b in self.result_blocks:
            if not self.accessed_tables[b.table_id]:
                raise ValueError(
                    f"query {self.query_id}: block in table {b.table_id} "
                    "but table bit not set")


@dataclass
class SyntheticSpec:
    seed: int = 0
    table_count: int = 4
    blocks_per_table: int = 1024
    scale_factor: float = 1.0
    zipf_z: float = 1.0
    pattern_mix: Dict[str, float] = field(default_factory=lambda: {
        "sequential-scan": 0.3,
        "strided": 0.25,
        "table-hop": 0.2,
        "point-lookup": 0.15,
        "insert-append": 0.05,
        "update-inplace": 0.05,
    })
    query_count: int = 1000
    session_len: int = 20
    lb_size: int = 32
    numeric_cols: int = 2
    text_cols: int = 1

    def __post_init__(self):
        total = sum(self.pattern_mix.values())
        if not math.isclose(total, 1.0, rel_tol=1e-9):
            raise ValueError(f"pattern weights sum to {total}, expected 1")
        for p in self.pattern_mix:
            if p not in PATTERNS:
                raise ValueError(f"unknown pattern {p!r}")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")


@dataclass
class Workload:
    catalog: TableCatalog
    queries: List[QueryRecord]
    # (query_id, table_id, new_block_count) catalog growth from append inserts;
    # in-memory bookkeeping only, not part of the serialized canonical form.
    growth_events: List[Tuple[int, int, int]] = field(default_factory=list)
    source_spec: Optional[SyntheticSpec] = None

    def __eq__(self, other):
        if not isinstance(other, Workload):
            return NotImplemented
        return (self.catalog == other.catalog and self.queries == other.queries)


# ---------------------------------------------------------------------------
# generator

def _make_catalog(spec: SyntheticSpec) -> TableCatalog:
    blocks = max(1, int(round(spec.blocks_per_table * spec.scale_factor)))
    tables = []
    for t in range(spec.table_count):
        cols = [ColumnSpec(f"n{c}", "numeric") for c in range(spec.numeric_cols)]
        cols += [ColumnSpec(f"s{c}", "text") for c in range(spec.text_cols)]
        tables.append(TableSpec(name=f"t{t}", block_count=blocks, columns=cols))
    return TableCatalog(tables=tables, lb_size=spec.lb_size)


def _zipf_probs(n: int, z: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-z) if z > 0 else np.ones(n)
    return w / w.sum()


_TEXT_VOCAB = [f"w{i:02d}" for i in range(32)]


def _session_queries(pattern: str, spec: SyntheticSpec, catalog: TableCatalog,
                     rng: np.random.Generator, n_queries: int,
                     start_qid: int, growth: List[Tuple[int, int, int]]
                     ) -> List[QueryRecord]:
    tb = catalog.table_count
    out: List[QueryRecord] = []

    def blocks_of(table_id: int) -> int:
        return catalog.tables[table_id].block_count

    def record(qid, qtype, lbas, join="", filt=""):
        bitmap = [0] * tb
        for b in lbas:
            bitmap[b.table_id] = 1
        jt = ["" for _ in range(tb)]
        ft = ["" for _ in range(tb)]
        touched = [i for i, bit in enumerate(bitmap) if bit]
        for i in touched:
            jt[i] = join
            ft[i] = filt
        return QueryRecord(qid, 0.0, qtype, bitmap, jt, ft, lbas)

    if pattern == "sequential-scan":
        t = int(rng.integers(tb))
        run = int(rng.integers(2, 9)) * catalog.lb_size // 4 or 1
        pos = int(rng.integers(blocks_of(t)))
        for i in range(n_queries):
            lbas = [TableLBA(t, (pos + j) % blocks_of(t)) for j in range(run)]
            out.append(record(start_qid + i, "select", lbas,
                              filt=f"{catalog.tables[t].name}.n0 > value"))
            pos = (pos + run) % blocks_of(t)
    elif pattern == "strided":
        t = int(rng.integers(tb))
        stride = max(catalog.lb_size, blocks_of(t) // 64)
        burst = 4
        pos = int(rng.integers(blocks_of(t)))
        for i in range(n_queries):
            lbas = [TableLBA(t, (pos + j * stride) % blocks_of(t))
                    for j in range(burst)]
            out.append(record(start_qid + i, "select", lbas,
                              filt=f"{catalog.tables[t].name}.n1 = value"))
            pos = (pos + burst * stride) % blocks_of(t)
    elif pattern == "table-hop":
        t1, t2 = rng.choice(tb, size=2, replace=tb < 2)
        t1, t2 = int(t1), int(t2)
        step = max(catalog.lb_size // 2, 1)
        base = int(rng.integers(min(blocks_of(t1), blocks_of(t2))))
        for i in range(n_queries):
            t = t1 if i % 2 == 0 else t2
            b = (base + (i // 2) * step) % blocks_of(t)
            lbas = [TableLBA(t, (b + j) % blocks_of(t)) for j in range(2)]
            join = (f"{catalog.tables[t1].name}.n0 = "
                    f"{catalog.tables[t2].name}.n0")
            out.append(record(start_qid + i, "select", lbas, join=join))
    elif pattern == "point-lookup":
        t = int(rng.integers(tb))
        probs = _zipf_probs(blocks_of(t), spec.zipf_z)
        # popularity ranks permuted so hot blocks are not always block 0
        order = rng.permutation(blocks_of(t))
        for i in range(n_queries):
            k = int(rng.integers(1, 4))
            picks = rng.choice(blocks_of(t), size=k, replace=True, p=probs)
            lbas = [TableLBA(t, int(order[p])) for p in picks]
            out.append(record(start_qid + i, "select", lbas,
                              filt=f"{catalog.tables[t].name}.s0 = literal"))
    elif pattern == "insert-append":
        t = int(rng.integers(tb))
        for i in range(n_queries):
            grow = int(rng.integers(1, 4))
            first_new = blocks_of(t)
            catalog.tables[t].block_count += grow
            lbas = [TableLBA(t, first_new + j) for j in range(grow)]
            out.append(record(start_qid + i, "insert", lbas))
            growth.append((start_qid + i, t, catalog.tables[t].block_count))
    elif pattern == "update-inplace":
        t = int(rng.integers(tb))
        hot = int(rng.integers(blocks_of(t)))
        for i in range(n_queries):
            k = int(rng.integers(1, 3))
            lbas = [TableLBA(t, (hot + int(rng.integers(4))) % blocks_of(t))
                    for _ in range(k)]
            out.append(record(start_qid + i, "update", lbas,
                              filt=f"{catalog.tables[t].name}.n0 = value"))
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return out


def generate(spec: SyntheticSpec) -> Workload:
    """Deterministic synthetic workload for a fixed spec (seed included)."""
    catalog = _make_catalog(spec)
    rng = np.random.default_rng(spec.seed)
    patterns = sorted(spec.pattern_mix)
    weights = np.array([spec.pattern_mix[p] for p in patterns])
    queries: List[QueryRecord] = []
    growth: List[Tuple[int, int, int]] = []
    qid = 0
    while qid < spec.query_count:
        pattern = patterns[int(rng.choice(len(patterns), p=weights))]
        n = min(max(1, int(rng.poisson(spec.session_len))),
                spec.query_count - qid)
        queries.extend(_session_queries(pattern, spec, catalog, rng, n,
                                        qid, growth))
        qid += n
    return Workload(catalog=catalog, queries=queries, growth_events=growth,
                    source_spec=spec)


def scale_catalog(w: Workload, factor: float) -> Workload:
    """Replay the generator's pattern programs against an enlarged catalog."""
    if w.source_spec is None:
        raise ValueError("no pattern program available for a loaded workload")
    if factor < 1:
        raise ValueError("scale factor must be >= 1")
    if factor == 1:
        return w
    spec = replace(w.source_spec,
                   scale_factor=w.source_spec.scale_factor * factor)
    return generate(spec)


def split(w: Workload, train_fraction: float) -> Tuple[Workload, Workload]:
    """Order-preserving prefix/suffix split sharing the catalog."""
    if not (0 < train_fraction < 1):
        raise ValueError("train_fraction must be in (0,1)")
    cut = int(len(w.queries) * train_fraction)
    return (Workload(w.catalog, w.queries[:cut], source_spec=w.source_spec),
            Workload(w.catalog, w.queries[cut:], source_spec=w.source_spec))


# ---------------------------------------------------------------------------
# deterministic block contents (desk-scale stand-in for real table data)

def table_blocks_raw(catalog: TableCatalog, table_id: int, seed: int,
                     vals_per_numeric: int = 4, tokens_per_text: int = 3
                     ) -> Tuple[np.ndarray, List[List[str]]]:
    """Raw per-block values for one table, derived only from (table, seed).

    Numeric columns are seeded random walks sampled per block; text columns
    are token draws from a small fixed vocabulary. Extending the block count
    keeps earlier blocks' values unchanged.
    """
    spec = catalog.tables[table_id]
    nblocks = spec.block_count
    num_cols = [c for c in spec.columns if c.kind == "numeric"]
    txt_cols = [c for c in spec.columns if c.kind == "text"]
    numeric = np.zeros((nblocks, len(num_cols) * vals_per_numeric))
    for ci, _col in enumerate(num_cols):
        rng = np.random.default_rng((seed, table_id, ci))
        walk = np.cumsum(rng.standard_normal(nblocks * vals_per_numeric))
        numeric[:, ci * vals_per_numeric:(ci + 1) * vals_per_numeric] = \
            walk.reshape(nblocks, vals_per_numeric)
    texts: List[List[str]] = [[] for _ in range(nblocks)]
    for ci, _col in enumerate(txt_cols):
        rng = np.random.default_rng((seed, table_id, 1000 + ci))
        toks = rng.integers(len(_TEXT_VOCAB), size=(nblocks, tokens_per_text))
        for b in range(nblocks):
            texts[b].append(" ".join(_TEXT_VOCAB[k] for k in toks[b]))
    return numeric, [" ".join(parts) for parts in texts]


# ---------------------------------------------------------------------------
# trace file format

def _b64(s: str) -> str:
    return base64.b64encode(s.encode("utf-8")).decode("ascii")


def _unb64(s: str) -> str:
    return base64.b64decode(s.encode("ascii")).decode("utf-8")


def save_trace(w: Workload, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"#catalog {w.catalog.lb_size} {w.catalog.table_count}\n")
        for t in w.catalog.tables:
            colspec = ",".join(f"{c.name}:{c.kind}" for c in t.columns)
            f.write(f"#table {t.name} {t.block_count} {colspec}\n")
        for q in w.queries:
            bitmap = 0
            for i, bit in enumerate(q.accessed_tables):
                bitmap |= bit << i
            blocks = ",".join(
                f"{w.catalog.tables[b.table_id].name}:{b.block_no}"
                for b in q.result_blocks)
            f.write("\t".join([
                str(q.query_id),
                repr(q.arrival_offset_ms),
                q.query_type,
                format(bitmap, "x"),
                ";".join(_b64(s) for s in q.join_text),
                ";".join(_b64(s) for s in q.filter_text),
                blocks,
            ]) + "\n")


def load_trace(path: str) -> Workload:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("#catalog"):
        raise TraceFormatError("line 1: missing catalog header")
    try:
        _, lb_size_s, tcount_s = lines[0].split()
        lb_size, tcount = int(lb_size_s), int(tcount_s)
    except ValueError as e:
        raise TraceFormatError(f"line 1: bad catalog header: {e}") from e
    tables = []
    idx = 1
    for _ in range(tcount):
        if idx >= len(lines) or not lines[idx].startswith("#table"):
            raise TraceFormatError(f"line {idx + 1}: expected #table line")
        parts = lines[idx].split(" ", 3)
        if len(parts) != 4:
            raise TraceFormatError(f"line {idx + 1}: bad #table line")
        _, name, count_s, colspec = parts
        try:
            count = int(count_s)
        except ValueError as e:
            raise TraceFormatError(
                f"line {idx + 1}: bad block count {count_s!r}") from e
        cols = []
        for cs in colspec.split(","):
            try:
                cname, kind = cs.split(":")
                cols.append(ColumnSpec(cname, kind))
            except ValueError as e:
                raise TraceFormatError(
                    f"line {idx + 1}: bad column spec {cs!r}") from e
        tables.append(TableSpec(name, count, cols))
        idx += 1
    catalog = TableCatalog(tables=tables, lb_size=lb_size)
    name_to_id = {t.name: i for i, t in enumerate(catalog.tables)}
    queries = []
    for lineno in range(idx, len(lines)):
        line = lines[lineno]
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise TraceFormatError(
                f"line {lineno + 1}: expected 7 fields, got {len(fields)}")
        qid_s, arr_s, qtype, bitmap_s, join_s, filt_s, blocks_s = fields
        try:
            qid = int(qid_s)
        except ValueError as e:
            raise TraceFormatError(
                f"line {lineno + 1}: field query_id: {qid_s!r}") from e
        try:
            arrival = float(arr_s)
        except ValueError as e:
            raise TraceFormatError(
                f"line {lineno + 1}: field arrival_ms: {arr_s!r}") from e
        if qtype not in QUERY_TYPES:
            raise TraceFormatError(
                f"line {lineno + 1}: field type: unknown {qtype!r}")
        try:
            bitmap_int = int(bitmap_s, 16)
        except ValueError as e:
            raise TraceFormatError(
                f"line {lineno + 1}: field tables_bitmap: {bitmap_s!r}") from e
        bitmap = [(bitmap_int >> i) & 1 for i in range(tcount)]
        try:
            join_text = [_unb64(s) for s in join_s.split(";")]
            filter_text = [_unb64(s) for s in filt_s.split(";")]
        except Exception as e:
            raise TraceFormatError(
                f"line {lineno + 1}: field conditions: {e}") from e
        if len(join_text) != tcount or len(filter_text) != tcount:
            raise TraceFormatError(
                f"line {lineno + 1}: field conditions: wrong table count")
        blocks = []
        if blocks_s:
            for pair in blocks_s.split(","):
                try:
                    tname, bno_s = pair.rsplit(":", 1)
                    bno = int(bno_s)
                except ValueError as e:
                    raise TraceFormatError(
                        f"line {lineno + 1}: field blocks: {pair!r}") from e
                if tname not in name_to_id:
                    raise TraceFormatError(
                        f"line {lineno + 1}: field blocks: unknown table "
                        f"{tname!r}")
                blocks.append(TableLBA(name_to_id[tname], bno))
        try:
            queries.append(QueryRecord(qid, arrival, qtype, bitmap,
                                       join_text, filter_text, blocks))
        except ValueError as e:
            raise TraceFormatError(f"line {lineno + 1}: {e}") from e
    return Workload(catalog=catalog, queries=queries)
