"""Block preprocessing and encoding, plus query-semantics construction.

Pipeline per table: min-max normalization of raw column values, deterministic
feature-hashing embeddings for text, incremental PCA for wide tables, and a
small per-table autoencoder that compresses preprocessed blocks to enc_dim
values. Query semantics combine the per-table mean of accessed block
encodings with a structured statement representation.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from sklearn.decomposition import IncrementalPCA

from .address import TableLBA
from .trace import QueryRecord, TableCatalog, table_blocks_raw

COND_EMBED_DIM = 8  # join/filter condition embedding width per table
DRIFT_THRESHOLD = 0.8

_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+")
_NUMERIC_RE = re.compile(r"^[0-9]+(_?[0-9]+)*$|^[0-9]*\.[0-9]+$")


def embed_text(s: str, dim: int) -> np.ndarray:
    """Deterministic signed feature-hashing embedding, L2-normalized.

    Tokenizes on non-alphanumerics and drops numeric literals so that
    conditions differing only in constants embed identically.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    v = np.zeros(dim)
    for tok in _TOKEN_RE.findall(s):
        if _NUMERIC_RE.match(tok):
            continue
        h = int.from_bytes(hashlib.blake2b(tok.lower().encode(),
                                           digest_size=8).digest(), "little")
        sign = 1.0 if (h >> 32) & 1 else -1.0
        v[h % dim] += sign
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class ColumnStats:
    """Running per-feature min/max for min-max normalization."""

    def __init__(self, width: int):
        self.width = width
        self.min = np.full(width, np.inf)
        self.max = np.full(width, -np.inf)
        self.seen = 0

    def update(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(rows)
        self.min = np.minimum(self.min, rows.min(axis=0))
        self.max = np.maximum(self.max, rows.max(axis=0))
        self.seen += rows.shape[0]

    def normalize(self, rows: np.ndarray) -> np.ndarray:
        """Map values to [-1, 1]; constant columns map to 0, new values clamp."""
        if self.seen == 0:
            raise ValueError("unseen column: no statistics collected")
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        span = self.max - self.min
        out = np.zeros_like(rows)
        nz = span > 0
        out[:, nz] = (rows[:, nz] - self.min[nz]) / span[nz] * 2.0 - 1.0
        return np.clip(out, -1.0, 1.0)


def normalize(x: float, stats: ColumnStats, col: int = 0) -> float:
    """Scalar min-max normalization of one column value."""
    if stats.seen == 0:
        raise ValueError("unseen column: no statistics collected")
    lo, hi = stats.min[col], stats.max[col]
    if hi <= lo:
        return 0.0
    return float(np.clip((x - lo) / (hi - lo) * 2.0 - 1.0, -1.0, 1.0))


# ---------------------------------------------------------------------------
# incremental PCA with drift detection

@dataclass
class IPCAState:
    n_components: int
    input_dim: int
    _ipca: IncrementalPCA = field(default=None, repr=False)

    def __post_init__(self):
        if self._ipca is None:
            self._ipca = IncrementalPCA(n_components=self.n_components)

    @property
    def components(self) -> Optional[np.ndarray]:
        return getattr(self._ipca, "components_", None)

    @property
    def mean(self) -> Optional[np.ndarray]:
        return getattr(self._ipca, "mean_", None)

    @property
    def samples_seen(self) -> int:
        return int(getattr(self._ipca, "n_samples_seen_", 0))

    def copy(self) -> "IPCAState":
        import copy
        return IPCAState(self.n_components, self.input_dim,
                         copy.deepcopy(self._ipca))

    def partial_fit(self, batch: np.ndarray) -> "IPCAState":
        batch = np.atleast_2d(batch)
        if batch.shape[1] != self.input_dim:
            raise ValueError(
                f"row width {batch.shape[1]} != input_dim {self.input_dim}")
        if self.samples_seen == 0 and batch.shape[0] < self.n_components:
            raise ValueError(
                f"insufficient rank seed: first batch has {batch.shape[0]} "
                f"rows < {self.n_components} components")
        self._ipca.partial_fit(batch)
        return self

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return self._ipca.transform(np.atleast_2d(rows))


def ipca_partial_fit(state: IPCAState, batch: np.ndarray) -> IPCAState:
    return state.partial_fit(batch)


def pc_cosine_drift(before: IPCAState, after: IPCAState) -> float:
    """Mean absolute cosine similarity between matched principal components."""
    a, b = before.components, after.components
    if a is None or b is None or a.shape != b.shape:
        raise ValueError("component shape mismatch (or unfitted state)")
    num = np.abs(np.sum(a * b, axis=1))
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return float(np.mean(num / np.maximum(den, 1e-12)))


# ---------------------------------------------------------------------------
# per-table autoencoder

class Autoencoder(torch.nn.Module):
    """Single-bottleneck tanh autoencoder compressing a block row to enc_dim."""

    def __init__(self, input_dim: int, enc_dim: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.enc = torch.nn.Linear(input_dim, enc_dim)
        self.dec = torch.nn.Linear(enc_dim, input_dim)
        with torch.no_grad():
            for lin in (self.enc, self.dec):
                torch.nn.init.xavier_uniform_(lin.weight, generator=g)
                lin.bias.zero_()

    def forward(self, x):
        return self.dec(torch.tanh(self.enc(x)))

    def encode(self, rows: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            z = torch.tanh(self.enc(torch.as_tensor(
                np.atleast_2d(rows), dtype=torch.float32)))
        return z.numpy().astype(np.float32)


def train_autoencoder(rows: np.ndarray, enc_dim: int, epochs: int = 50,
                      lr: float = 1e-3, seed: int = 0
                      ) -> Tuple[Autoencoder, List[float]]:
    """Train a per-table autoencoder with MSE; returns the loss history."""
    rows = np.atleast_2d(rows)
    if rows.shape[0] == 0:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    ae = Autoencoder(rows.shape[1], enc_dim, seed=seed)
    x = torch.as_tensor(rows, dtype=torch.float32)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    losses = []
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.nn.functional.mse_loss(ae(x), x)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    ae.eval()
    return ae, losses


# ---------------------------------------------------------------------------
# encoding store (binary per-table persistence)

_STORE_MAGIC = b"PFLBENC1"


def save_encoding_store(path: str, table_name: str, enc_dim: int,
                        rows: Dict[int, np.ndarray]) -> None:
    name = table_name.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_STORE_MAGIC)
        f.write(struct.pack("<H", len(name)))
        f.write(name)
        f.write(struct.pack("<II", enc_dim, len(rows)))
        for block_no in sorted(rows):
            f.write(struct.pack("<Q", block_no))
            f.write(np.asarray(rows[block_no], dtype="<f4").tobytes())


def load_encoding_store(path: str) -> Tuple[str, int, Dict[int, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(8) != _STORE_MAGIC:
            raise ValueError(f"{path}: not an encoding store")
        (nlen,) = struct.unpack("<H", f.read(2))
        name = f.read(nlen).decode("utf-8")
        enc_dim, count = struct.unpack("<II", f.read(8))
        rows = {}
        for _ in range(count):
            (block_no,) = struct.unpack("<Q", f.read(8))
            rows[block_no] = np.frombuffer(f.read(4 * enc_dim), dtype="<f4").copy()
    return name, enc_dim, rows


# ---------------------------------------------------------------------------
# orchestration: catalog-wide block encoder

class BlockEncoder:
    """Preprocesses and encodes blocks table by table.

    Holds, per table: raw value cache, ColumnStats, optional IPCA (only for
    preprocessed widths above `ipca_width_threshold`), the trained
    autoencoder, and the encoding store.
    """

    def __init__(self, catalog: TableCatalog, seed: int = 0, enc_dim: int = 16,
                 text_dim: int = 4, ae_epochs: int = 50,
                 ipca_width_threshold: int = 32, max_train_blocks: int = 512):
        self.catalog = catalog
        self.seed = seed
        self.enc_dim = enc_dim
        self.text_dim = text_dim
        self.ae_epochs = ae_epochs
        self.ipca_width_threshold = ipca_width_threshold
        self.max_train_blocks = max_train_blocks
        self.stats: Dict[int, ColumnStats] = {}
        self.ipca: Dict[int, IPCAState] = {}
        self.autoencoders: Dict[int, Autoencoder] = {}
        self.store: Dict[int, Dict[int, np.ndarray]] = {}
        self.ae_loss_history: Dict[int, List[float]] = {}
        self._known_blocks: Dict[int, int] = {}
        self.drift_log: List[Tuple[int, float]] = []

    # -- preprocessing --------------------------------------------------

    def _raw_matrix(self, table_id: int) -> np.ndarray:
        numeric, texts = table_blocks_raw(self.catalog, table_id, self.seed)
        if texts and any(texts):
            tvecs = np.stack([embed_text(t, self.text_dim) for t in texts])
            return np.hstack([numeric, tvecs]) if numeric.size else tvecs
        return numeric

    def _preprocess(self, table_id: int, raw_rows: np.ndarray) -> np.ndarray:
        st = self.stats[table_id]
        rows = st.normalize(raw_rows)
        if table_id in self.ipca:
            rows = self.ipca[table_id].transform(rows)
        return rows

    def fit(self, table_id: int) -> None:
        """Build stats, IPCA, and autoencoder for one table; encode its blocks."""
        raw = self._raw_matrix(table_id)
        st = ColumnStats(raw.shape[1])
        st.update(raw)
        self.stats[table_id] = st
        width = raw.shape[1]
        if width > self.ipca_width_threshold:
            n_comp = min(8, width)
            state = IPCAState(n_comp, width)
            state.partial_fit(st.normalize(raw))
            self.ipca[table_id] = state
        rows = self._preprocess(table_id, raw)
        train_rows = rows
        if rows.shape[0] > self.max_train_blocks:
            sel = np.random.default_rng((self.seed, table_id)).choice(
                rows.shape[0], size=self.max_train_blocks, replace=False)
            train_rows = rows[sel]
        ae, losses = train_autoencoder(train_rows, self.enc_dim,
                                       epochs=self.ae_epochs,
                                       seed=self.seed + table_id)
        self.autoencoders[table_id] = ae
        self.ae_loss_history[table_id] = losses
        enc = ae.encode(rows)
        self.store[table_id] = {b: enc[b] for b in range(rows.shape[0])}
        self._known_blocks[table_id] = rows.shape[0]

    def fit_all(self) -> None:
        for t in range(self.catalog.table_count):
            self.fit(t)

    # -- lookup ---------------------------------------------------------

    def encode_block(self, lba: TableLBA) -> np.ndarray:
        """Encoding of one block; encodes on first touch for new blocks."""
        table_store = self.store.get(lba.table_id)
        if table_store is None:
            self.fit(lba.table_id)
            table_store = self.store[lba.table_id]
        if lba.block_no not in table_store:
            self.refresh_table(lba.table_id)
            table_store = self.store[lba.table_id]
        if lba.block_no not in table_store:
            return np.zeros(self.enc_dim, dtype=np.float32)
        return table_store[lba.block_no]

    def refresh_table(self, table_id: int) -> Optional[float]:
        """Ingest blocks added since the last fit; returns the drift score.

        Fits the new rows into the IPCA, compares principal components before
        and after, and retrains the table's autoencoder when the mean cosine
        similarity drops below the drift threshold. Only new blocks are
        (re-)encoded either way.
        """
        raw = self._raw_matrix(table_id)
        known = self._known_blocks.get(table_id, 0)
        if raw.shape[0] <= known:
            return None
        new_rows_raw = raw[known:]
        st = self.stats[table_id]
        drift = None
        if table_id in self.ipca:
            before = self.ipca[table_id].copy()
            self.ipca[table_id].partial_fit(st.normalize(new_rows_raw))
            drift = pc_cosine_drift(before, self.ipca[table_id])
            self.drift_log.append((table_id, drift))
            if drift < DRIFT_THRESHOLD:
                rows_all = self._preprocess(table_id, raw)
                ae, losses = train_autoencoder(
                    rows_all[: self.max_train_blocks], self.enc_dim,
                    epochs=self.ae_epochs, seed=self.seed + table_id)
                self.autoencoders[table_id] = ae
                self.ae_loss_history[table_id].extend(losses)
        new_enc = self.autoencoders[table_id].encode(
            self._preprocess(table_id, new_rows_raw))
        for i in range(new_enc.shape[0]):
            self.store[table_id][known + i] = new_enc[i]
        self._known_blocks[table_id] = raw.shape[0]
        return drift

    # -- query semantics ------------------------------------------------

    def query_result_encoding(self, blocks: List[TableLBA]) -> np.ndarray:
        """|TB| x enc_dim matrix; row t is the mean encoding of blocks in t."""
        out = np.zeros((self.catalog.table_count, self.enc_dim),
                       dtype=np.float32)
        per_table: Dict[int, List[np.ndarray]] = {}
        for b in blocks:
            per_table.setdefault(b.table_id, []).append(self.encode_block(b))
        for t, encs in per_table.items():
            out[t] = np.mean(encs, axis=0)
        return out

    def save_store(self, directory: str) -> None:
        import os
        os.makedirs(directory, exist_ok=True)
        for t, rows in self.store.items():
            save_encoding_store(
                os.path.join(directory, f"{self.catalog.tables[t].name}.enc"),
                self.catalog.tables[t].name, self.enc_dim, rows)


def statement_repr(q: QueryRecord, table_count: int) -> np.ndarray:
    """Structured statement vector: type one-hot, table bitmap, per-table
    join and filter condition embeddings (8 each)."""
    from .trace import QUERY_TYPES
    type_onehot = np.zeros(4)
    type_onehot[QUERY_TYPES.index(q.query_type)] = 1.0
    bitmap = np.asarray(q.accessed_tables, dtype=np.float64)
    joins = np.concatenate([embed_text(q.join_text[t], COND_EMBED_DIM)
                            for t in range(table_count)])
    filters = np.concatenate([embed_text(q.filter_text[t], COND_EMBED_DIM)
                              for t in range(table_count)])
    return np.concatenate([type_onehot, bitmap, joins, filters])


def statement_repr_len(table_count: int) -> int:
    return 4 + table_count + 2 * COND_EMBED_DIM * table_count
