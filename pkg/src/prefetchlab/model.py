"""Multi-task prediction network and its training machinery.

Each query context combines five components (result encoding matrix,
statement representation, binary delta vector, delta-count one-hot, and the
min-reference table one-hot). Components are embedded separately with
time-distributed dense layers, merged into 128-dim sequence vectors, and fed
through an LSTM. Three heads predict the next query's accessed tables
(sigmoid), delta-count bucket (softmax), and delta classes (sigmoid), each
with a task-specific extra input from the last observed query.
"""

from __future__ import annotations

import copy
import json
import math
import struct
import zlib
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

COUNT_BUCKETS = 16


def count_bucket(n: int) -> int:
    """Geometric bucket index for a delta count: 0, 1, [2,4), [4,8), ..."""
    if n <= 0:
        return 0
    return min(int(math.floor(math.log2(n))) + 1, COUNT_BUCKETS - 1)


def bucket_midpoint(b: int) -> int:
    """Representative count for a bucket (geometric midpoint, rounded)."""
    if b <= 0:
        return 0
    if b == 1:
        return 1
    lo = 2 ** (b - 1)
    return int(round(math.sqrt(lo * (2 * lo))))


def count_onehot(n: int) -> np.ndarray:
    v = np.zeros(COUNT_BUCKETS, dtype=np.float32)
    v[count_bucket(n)] = 1.0
    return v


@dataclass
class ModelConfig:
    table_count: int
    enc_dim: int
    stmt_dim: int
    num_delta_classes: int   # 2*ds + 1
    lookback: int = 2
    res_embed: int = 64
    stmt_embed: int = 32
    bi_embed: int = 64
    count_embed: int = 8
    table_embed: int = 8
    merge_dim: int = 128
    lstm_hidden: int = 64
    lstm_layers: int = 1
    dropout: float = 0.2


@dataclass
class QueryContext:
    """One query's model input components."""

    result_enc: np.ndarray      # (|TB|, enc_dim)
    stmt: np.ndarray            # statement representation
    bi_delta: np.ndarray        # (num_delta_classes,)
    count_onehot: np.ndarray    # (COUNT_BUCKETS,)
    min_table_onehot: np.ndarray  # (|TB|,)


def zero_context(cfg: ModelConfig) -> QueryContext:
    return QueryContext(
        result_enc=np.zeros((cfg.table_count, cfg.enc_dim), dtype=np.float32),
        stmt=np.zeros(cfg.stmt_dim, dtype=np.float32),
        bi_delta=np.zeros(cfg.num_delta_classes, dtype=np.float32),
        count_onehot=np.zeros(COUNT_BUCKETS, dtype=np.float32),
        min_table_onehot=np.zeros(cfg.table_count, dtype=np.float32),
    )


class ContextWindow:
    """Fixed-length window of the last `lookback` query contexts."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.items: List[QueryContext] = [zero_context(cfg)
                                          for _ in range(cfg.lookback)]

    def push(self, ctx: QueryContext) -> None:
        self.items.pop(0)
        self.items.append(ctx)

    @property
    def last(self) -> QueryContext:
        return self.items[-1]


class PredictionModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        tb, k, c = cfg.table_count, cfg.num_delta_classes, COUNT_BUCKETS
        self.res_embed = nn.Linear(tb * cfg.enc_dim, cfg.res_embed)
        self.stmt_embed = nn.Linear(cfg.stmt_dim, cfg.stmt_embed)
        self.bi_embed = nn.Linear(k, cfg.bi_embed)
        self.count_embed = nn.Linear(c, cfg.count_embed)
        self.table_embed = nn.Linear(tb, cfg.table_embed)
        merged_in = (cfg.res_embed + cfg.stmt_embed + cfg.bi_embed +
                     cfg.count_embed + cfg.table_embed)
        self.merge = nn.Linear(merged_in, cfg.merge_dim)
        self.lstm = nn.LSTM(cfg.merge_dim, cfg.lstm_hidden,
                            num_layers=cfg.lstm_layers, batch_first=True)
        self.drop = nn.Dropout(cfg.dropout)
        self.table_head = nn.Linear(cfg.lstm_hidden + tb, tb)
        self.count_head = nn.Linear(cfg.lstm_hidden + c, c)
        self.delta_head = nn.Linear(cfg.lstm_hidden + k, k)
        self.head_names = ("table_head", "count_head", "delta_head")

    def forward(self, res, stmt, bi, cnt, mtb, last_cnt, last_tb, last_bi):
        """res (B,L,TB*enc), stmt (B,L,S), bi (B,L,K), cnt (B,L,C),
        mtb (B,L,TB); extras are the last query's raw vectors (B,·)."""
        for name, x, dim in (("result_enc", res, self.res_embed.in_features),
                             ("stmt", stmt, self.stmt_embed.in_features),
                             ("bi_delta", bi, self.bi_embed.in_features),
                             ("count_onehot", cnt, self.count_embed.in_features),
                             ("min_table_onehot", mtb, self.table_embed.in_features)):
            if x.shape[-1] != dim:
                raise ValueError(
                    f"shape mismatch in component {name}: got {x.shape[-1]}, "
                    f"expected {dim}")
        emb = torch.cat([
            torch.relu(self.res_embed(res)),
            torch.relu(self.stmt_embed(stmt)),
            torch.relu(self.bi_embed(bi)),
            torch.relu(self.count_embed(cnt)),
            torch.relu(self.table_embed(mtb)),
        ], dim=-1)
        seq = torch.relu(self.merge(emb))
        out, _ = self.lstm(seq)
        h = self.drop(out[:, -1, :])
        table_probs = torch.sigmoid(
            self.table_head(torch.cat([h, last_tb], dim=-1)))
        count_probs = torch.softmax(
            self.count_head(torch.cat([h, last_cnt], dim=-1)), dim=-1)
        delta_probs = torch.sigmoid(
            self.delta_head(torch.cat([h, last_bi], dim=-1)))
        return table_probs, count_probs, delta_probs

    def predict(self, window: ContextWindow
                ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Deterministic single-window inference (dropout off)."""
        self.eval()
        tensors = window_tensors([window])
        with torch.no_grad():
            t, c, d = self.forward(*tensors)
        return t[0].numpy(), c[0].numpy(), d[0].numpy()


def window_tensors(windows: Sequence[ContextWindow]) -> Tuple[torch.Tensor, ...]:
    def stack(get):
        return torch.as_tensor(
            np.stack([[get(ctx) for ctx in w.items] for w in windows]),
            dtype=torch.float32)
    res = stack(lambda c: c.result_enc.reshape(-1))
    stmt = stack(lambda c: c.stmt)
    bi = stack(lambda c: c.bi_delta)
    cnt = stack(lambda c: c.count_onehot)
    mtb = stack(lambda c: c.min_table_onehot)
    last_cnt = cnt[:, -1, :]
    last_tb = mtb[:, -1, :]
    last_bi = bi[:, -1, :]
    return res, stmt, bi, cnt, mtb, last_cnt, last_tb, last_bi


# ---------------------------------------------------------------------------
# focal loss

_P_CLIP = 1e-7


def focal_loss(y_true, y_prob, alpha: float, gamma: float) -> float:
    """Mean over labels of -alpha * (1 - p_t)^gamma * log(p_t), where p_t is
    the predicted probability of the true label value. Reduces to binary
    cross-entropy at alpha=1, gamma=0."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_prob = np.asarray(y_prob, dtype=np.float64)
    if y_true.shape != y_prob.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_prob.shape}")
    p = np.clip(y_prob, _P_CLIP, 1.0 - _P_CLIP)
    p_t = np.where(y_true > 0.5, p, 1.0 - p)
    return float(np.mean(-alpha * (1.0 - p_t) ** gamma * np.log(p_t)))


def focal_loss_t(y_true: torch.Tensor, y_prob: torch.Tensor,
                 alpha: float, gamma: float) -> torch.Tensor:
    p = torch.clamp(y_prob, _P_CLIP, 1.0 - _P_CLIP)
    p_t = torch.where(y_true > 0.5, p, 1.0 - p)
    return (-alpha * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 25
    patience: int = 3
    validation_fraction: float = 0.1
    focal_alpha: float = 0.75
    focal_gamma: float = 3.0
    fine_tune_epochs: int = 15
    fine_tune_lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.validation_fraction < 1):
            raise ValueError("validation_fraction must be in (0,1)")


@dataclass
class TrainTargets:
    tables: np.ndarray       # (N, |TB|) bitmaps
    count_buckets: np.ndarray  # (N,) int bucket index
    deltas: np.ndarray       # (N, num_delta_classes) bi_delta of next query


def _total_loss(model: PredictionModel, batch, targets, cfg: TrainConfig):
    t_prob, c_prob, d_prob = model(*batch)
    tb_t, cb_t, dl_t = targets
    loss = (focal_loss_t(dl_t, d_prob, cfg.focal_alpha, cfg.focal_gamma)
            + focal_loss_t(tb_t, t_prob, cfg.focal_alpha, cfg.focal_gamma)
            + nn.functional.nll_loss(
                torch.log(torch.clamp(c_prob, _P_CLIP, 1.0)), cb_t))
    d_loss = focal_loss_t(dl_t, d_prob, cfg.focal_alpha, cfg.focal_gamma)
    return loss, d_loss


def _dataset_tensors(windows: Sequence[ContextWindow], targets: TrainTargets):
    inputs = window_tensors(windows)
    tb_t = torch.as_tensor(targets.tables, dtype=torch.float32)
    cb_t = torch.as_tensor(targets.count_buckets, dtype=torch.long)
    dl_t = torch.as_tensor(targets.deltas, dtype=torch.float32)
    return inputs, (tb_t, cb_t, dl_t)


def _slice(tensors, idx):
    return tuple(t[idx] for t in tensors)


def train(model: PredictionModel, windows: Sequence[ContextWindow],
          targets: TrainTargets, cfg: TrainConfig,
          head_only: bool = False) -> List[Tuple[float, float]]:
    """Train with Adam; early stop on validation delta-head loss.

    Returns the loss history as (train_total, val_delta) per epoch.
    """
    if len(windows) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(1)
    inputs, targs = _dataset_tensors(windows, targets)
    n = len(windows)
    n_val = max(1, int(n * cfg.validation_fraction)) if n > 1 else 0
    train_idx = torch.arange(0, n - n_val)
    val_idx = torch.arange(n - n_val, n)
    params = [p for name, p in model.named_parameters()
              if not head_only or name.split(".")[0] in model.head_names]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    history: List[Tuple[float, float]] = []
    best_val = float("inf")
    best_state = None
    bad_epochs = 0
    # head-only fine-tuning runs its full epoch budget, no early stop
    epochs = cfg.fine_tune_epochs if head_only else cfg.max_epochs
    patience = epochs + 1 if head_only else cfg.patience
    for _epoch in range(epochs):
        model.train()
        perm = train_idx[torch.randperm(len(train_idx))]
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            loss, _ = _total_loss(model, _slice(inputs, idx),
                                  _slice(targs, idx), cfg)
            if torch.isnan(loss):
                raise RuntimeError(
                    "training diverged: NaN loss; lower the learning rate")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        model.eval()
        with torch.no_grad():
            if n_val:
                _, val_delta = _total_loss(model, _slice(inputs, val_idx),
                                           _slice(targs, val_idx), cfg)
                val_delta = float(val_delta)
            else:
                val_delta = total / max(len(train_idx), 1)
        history.append((total / max(len(train_idx), 1), val_delta))
        if val_delta < best_val - 1e-9:
            best_val = val_delta
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def fine_tune(model: PredictionModel, windows: Sequence[ContextWindow],
              targets: TrainTargets,
              remap: Sequence[Tuple[int, Optional[int], int]],
              cfg: TrainConfig) -> List[Tuple[float, float]]:
    """Head-only retraining after a vocabulary refresh.

    Non-head weights are frozen; delta-head output units whose class was
    remapped get their incoming weights reinitialized before training.
    """
    if cfg.fine_tune_epochs == 0 and not remap:
        return []
    with torch.no_grad():
        if remap:
            g = torch.Generator().manual_seed(cfg.seed)
            fan_in = model.delta_head.in_features
            bound = 1.0 / math.sqrt(fan_in)
            for class_idx, _old, _new in remap:
                model.delta_head.weight[class_idx].uniform_(
                    -bound, bound, generator=g)
                model.delta_head.bias[class_idx] = 0.0
    if len(windows) == 0 or cfg.fine_tune_epochs == 0:
        return []
    from dataclasses import replace as dc_replace
    ft_cfg = dc_replace(cfg, learning_rate=cfg.fine_tune_lr)
    return train(model, windows, targets, ft_cfg, head_only=True)


# ---------------------------------------------------------------------------
# gradient check (finite-difference oracle)

def gradient_check(model: PredictionModel, windows: Sequence[ContextWindow],
                   targets: TrainTargets, cfg: TrainConfig,
                   h: float = 1e-4) -> float:
    """Max relative error between analytic and central-FD gradients.

    Runs in double precision; intended for toy-sized networks.
    """
    m = copy.deepcopy(model).double()
    m.train(False)  # dropout off so FD and analytic see the same function
    inputs, targs = _dataset_tensors(windows, targets)
    inputs = tuple(t.double() for t in inputs)
    targs = (targs[0].double(), targs[1], targs[2].double())

    def loss_value() -> torch.Tensor:
        loss, _ = _total_loss(m, inputs, targs, cfg)
        return loss

    loss = loss_value()
    m.zero_grad()
    loss.backward()
    max_err = 0.0
    for p in m.parameters():
        grad = p.grad.detach().clone()
        flat = p.data.view(-1)
        gflat = grad.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            lp = float(loss_value().detach())
            flat[i] = orig - h
            lm = float(loss_value().detach())
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            a = float(gflat[i])
            denom = max(abs(a), abs(fd), 1e-8)
            max_err = max(max_err, abs(a - fd) / denom)
    return max_err


# ---------------------------------------------------------------------------
# adaptive table threshold

@dataclass
class ThresholdState:
    tau: float = 0.1
    alpha: float = 0.1
    variant: str = "recall-max"  # or "literal"

    TAU_MIN = 0.001
    TAU_MAX = 0.999

    def __post_init__(self):
        if self.variant not in ("recall-max", "literal"):
            raise ValueError(f"unknown threshold variant {self.variant!r}")


def adapt_threshold(st: ThresholdState, table_probs: np.ndarray,
                    true_tables: Sequence[int]) -> ThresholdState:
    """Per-step threshold update driven by false negatives.

    recall-max (default): any false negative lowers tau by alpha*|FN|,
    otherwise tau creeps up by alpha/10. literal: decrease only when tau is
    below the minimum probability of the accessed tables.
    """
    probs = np.asarray(table_probs)
    accessed = [t for t, bit in enumerate(true_tables) if bit]
    fn = sum(1 for t in accessed if probs[t] < st.tau)
    tau = st.tau
    if st.variant == "literal":
        min_p = min((probs[t] for t in accessed), default=1.0)
        if tau < min_p:
            tau = tau - st.alpha * fn
        else:
            tau = tau + st.alpha / 10.0
    else:
        if fn > 0:
            tau = tau - st.alpha * fn
        else:
            tau = tau + st.alpha / 10.0
    tau = min(max(tau, ThresholdState.TAU_MIN), ThresholdState.TAU_MAX)
    return ThresholdState(tau=tau, alpha=st.alpha, variant=st.variant)


# ---------------------------------------------------------------------------
# checkpoint format: JSON header + float32 weight blocks + CRC32

_CKPT_MAGIC = b"PFLBMDL1"


def save_checkpoint(path: str, model: PredictionModel,
                    extra_meta: Optional[Dict] = None) -> None:
    header = {
        "config": asdict(model.cfg),
        "shapes": {name: list(t.shape)
                   for name, t in model.state_dict().items()},
        "meta": extra_meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += _CKPT_MAGIC
    body += struct.pack("<I", len(hbytes))
    body += hbytes
    for _name, t in model.state_dict().items():
        body += t.detach().numpy().astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(body))


def load_checkpoint(path: str) -> Tuple[PredictionModel, Dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    model = PredictionModel(cfg)
    offset = 12 + hlen
    state = {}
    for name, t in model.state_dict().items():
        shape = header["shapes"][name]
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
        state[name] = torch.as_tensor(arr.copy()).reshape(shape)
        offset += 4 * n
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]


def checkpoint_crc(path: str) -> int:
    with open(path, "rb") as f:
        data = f.read()
    (stored,) = struct.unpack("<I", data[-4:])
    return stored
