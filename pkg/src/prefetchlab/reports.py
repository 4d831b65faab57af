"""Report emission: delimited metric/summary files plus rendered figures.

Every report writes machine-readable CSV first; matplotlib figures are
rendered to PNG next to the CSV for quick inspection.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from typing import Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import address
from .simulator import (RunMetrics, hit_ratio, miss_coverage, recall,
                        relative_io)
from .trace import Workload

METRIC_FIELDS = [
    "policy", "config_hash", "hits", "misses", "accessed_blocks",
    "correct_prefetches", "misses_np", "io_time_ms", "io_time_np_ms",
    "prefetch_time_ms", "exec_time_ms", "idle_time_ms", "prefetched_blocks",
    "hit_ratio", "recall", "miss_coverage", "relative_io", "p95_latency_ms",
]


def config_hash(config: Dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _fmt(v) -> str:
    if v is None:
        return ""  # absent value, never 0
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def metrics_row(m: RunMetrics, np_run: Optional[RunMetrics],
                cfg_hash: str) -> Dict[str, str]:
    mc = miss_coverage(m, np_run) if np_run else None
    rio = relative_io(m, np_run) if np_run else None
    p95 = m.p95_latency()
    overall_p95 = max(p95.values()) if p95 else None
    return {
        "policy": m.policy,
        "config_hash": cfg_hash,
        "hits": m.hits, "misses": m.misses,
        "accessed_blocks": m.accessed_blocks,
        "correct_prefetches": m.correct_prefetches,
        "misses_np": m.misses_np,
        "io_time_ms": m.io_time_ms, "io_time_np_ms": m.io_time_np_ms,
        "prefetch_time_ms": m.prefetch_time_ms,
        "exec_time_ms": m.exec_time_ms, "idle_time_ms": m.idle_time_ms,
        "prefetched_blocks": m.prefetched_blocks,
        "hit_ratio": hit_ratio(m), "recall": recall(m),
        "miss_coverage": mc, "relative_io": rio,
        "p95_latency_ms": overall_p95,
    }


def write_metrics_csv(path: str, rows: Sequence[Dict]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        wr.writeheader()
        for row in rows:
            wr.writerow({k: _fmt(row.get(k)) for k in METRIC_FIELDS})


def read_metrics_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames is None or "policy" not in rd.fieldnames:
            raise ValueError(f"{path}: not a metrics CSV")
        return list(rd)


def write_per_query_csv(path: str, m: RunMetrics) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["query_id", "hits", "misses", "latency_ms"])
        for i, (h, mi, lat) in enumerate(zip(
                m.per_query_hits, m.per_query_misses, m.per_query_latency_ms)):
            wr.writerow([i, h, mi, f"{lat:.6g}"])


# ---------------------------------------------------------------------------
# delta distribution report

def delta_report(w: Workload, outdir: str, prefix: str = "deltas") -> Dict:
    """Per-query delta values under flat consecutive vs table-based
    labeling, as CSV plus a rendered scatter figure."""
    from .pipeline import collect_delta_sets, unique_delta_study, _flat_lba
    os.makedirs(outdir, exist_ok=True)
    rows = []
    prev_flat: List[int] = []
    for qi, q in enumerate(w.queries):
        flat = [_flat_lba(w, b) for b in q.result_blocks]
        for d in address.consecutive_deltas(prev_flat[-1:] + flat):
            rows.append((qi, "consecutive", d))
        prev_flat = flat or prev_flat
    qi = 0
    for offs in collect_delta_sets(w, "min"):
        for d in offs:
            rows.append((qi, "table-min", d))
        qi += 1
    csv_path = os.path.join(outdir, f"{prefix}.csv")
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["query_index", "labeling", "delta"])
        wr.writerows(rows)

    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for ax, label in zip(axes, ("consecutive", "table-min")):
        pts = [(qi, d) for qi, lab, d in rows if lab == label]
        if pts:
            ax.scatter(*zip(*pts), s=2, alpha=0.4)
        ax.set_title(label)
        ax.set_xlabel("query")
        ax.set_ylabel("delta")
    fig.tight_layout()
    fig_path = os.path.join(outdir, f"{prefix}.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)

    study = unique_delta_study(w)
    with open(os.path.join(outdir, f"{prefix}_unique.json"), "w") as f:
        json.dump(study, f, indent=2)
    return {"csv": csv_path, "figure": fig_path, "unique": study}


# ---------------------------------------------------------------------------
# training report

def training_report(outdir: str, loss_history: Sequence, study: Dict,
                    vocab_stats: Dict) -> Dict:
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, "training_loss.csv")
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "train_loss", "val_delta_loss"])
        for i, (tr, vl) in enumerate(loss_history):
            wr.writerow([i, f"{tr:.6g}", f"{vl:.6g}"])
    summary = {"unique_deltas": study, "vocab": vocab_stats,
               "epochs": len(loss_history)}
    json_path = os.path.join(outdir, "training_report.json")
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2)

    fig, ax = plt.subplots(figsize=(6, 4))
    if loss_history:
        ax.plot([h[0] for h in loss_history], label="train total")
        ax.plot([h[1] for h in loss_history], label="val delta")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig_path = os.path.join(outdir, "training_loss.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "json": json_path, "figure": fig_path}


# ---------------------------------------------------------------------------
# policy comparison

COMPARE_METRICS = ["hit_ratio", "recall", "miss_coverage", "relative_io",
                   "p95_latency_ms"]


def compare_runs(csv_paths: Sequence[str], outdir: str) -> Dict:
    """Aligned summary over policies plus long-format plot data and a bar
    chart per metric."""
    os.makedirs(outdir, exist_ok=True)
    rows: List[Dict[str, str]] = []
    for p in csv_paths:
        rows.extend(read_metrics_csv(p))
    hashes = {r["config_hash"] for r in rows}
    warning = None
    if len(hashes) > 1:
        warning = f"runs span {len(hashes)} distinct configs; table is partial"

    summary_path = os.path.join(outdir, "summary.csv")
    with open(summary_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["policy"] + COMPARE_METRICS)
        for r in rows:
            wr.writerow([r["policy"]] + [r.get(mname, "")
                                         for mname in COMPARE_METRICS])
    long_path = os.path.join(outdir, "summary_long.csv")
    with open(long_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["policy", "metric", "value"])
        for r in rows:
            for mname in COMPARE_METRICS:
                if r.get(mname):
                    wr.writerow([r["policy"], mname, r[mname]])

    fig, axes = plt.subplots(1, len(COMPARE_METRICS),
                             figsize=(3.2 * len(COMPARE_METRICS), 3.5))
    for ax, mname in zip(axes, COMPARE_METRICS):
        names = [r["policy"] for r in rows if r.get(mname)]
        vals = [float(r[mname]) for r in rows if r.get(mname)]
        ax.bar(range(len(vals)), vals)
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_title(mname, fontsize=9)
    fig.tight_layout()
    fig_path = os.path.join(outdir, "summary.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"summary": summary_path, "long": long_path, "figure": fig_path,
            "warning": warning, "rows": rows}
