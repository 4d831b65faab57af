"""Command-line experiment driver.

Subcommands: gen (synthetic trace), train (artifacts + training report),
simulate (paired NP/policy runs, metrics CSV), compare (summary table and
figures), delta-report (delta distribution report).

Config precedence: built-in defaults < --config file (flat `key = value`)
< repeated --set key=value. PREFETCHLAB_SEED overrides the default seed.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Dict, List

from . import lab, reports, trace as trace_mod
from .simulator import run_paired


def _load_config(args) -> Dict[str, object]:
    overrides: Dict[str, object] = {}
    if getattr(args, "config", None):
        overrides.update(lab.parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return lab.make_config(overrides)


def _parse_patterns(spec: str) -> Dict[str, float]:
    out = {}
    for item in spec.split(","):
        name, weight = item.split("=")
        out[name.strip()] = float(weight)
    return out


def cmd_gen(args) -> int:
    config = _load_config(args)
    kwargs = dict(
        seed=int(config["seed"]),
        table_count=args.tables,
        blocks_per_table=args.blocks,
        scale_factor=args.sf,
        zipf_z=args.zipf,
        query_count=args.queries,
        session_len=args.session,
        lb_size=int(config["trace.lb_size"]),
    )
    if args.patterns:
        kwargs["pattern_mix"] = _parse_patterns(args.patterns)
    spec = trace_mod.SyntheticSpec(**kwargs)
    w = trace_mod.generate(spec)
    trace_mod.save_trace(w, args.out)
    print(f"wrote {len(w.queries)} queries, "
          f"{w.catalog.table_count} tables -> {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    w = trace_mod.load_trace(args.trace)
    art = lab.train_pipeline(w, config)
    paths = lab.save_artifacts(art, args.out)
    vocab_stats = {
        "ds": art.vocab.ds,
        "active": sum(1 for off in art.vocab.deltas if off is not None),
        "classes": art.vocab.num_classes,
    }
    rep = reports.training_report(args.out, art.loss_history, art.study,
                                  vocab_stats)
    print(f"checkpoint: {paths['checkpoint']}")
    print(f"vocab:      {paths['vocab']}")
    print(f"report:     {rep['json']}")
    print("unique deltas:", json.dumps(art.study))
    return 0


def cmd_simulate(args) -> int:
    config = _load_config(args)
    w = trace_mod.load_trace(args.trace)
    artifacts = None
    if args.policy in ("grasp", "grasp-nt"):
        if not args.artifacts:
            raise ValueError(f"policy {args.policy!r} requires --artifacts")
        artifacts = lab.load_artifacts(args.artifacts, w.catalog, config)
    policy = lab.build_policy(args.policy, w.catalog, config, artifacts)
    sim = lab.sim_cfg_from(config, args.policy)
    metrics, np_metrics = run_paired(
        w, policy, sim, lab.cost_from(config), lab.arrival_from(config))
    metrics.policy = args.policy
    np_metrics.policy = "np"
    chash = reports.config_hash(config)
    rows = [reports.metrics_row(np_metrics, np_metrics, chash),
            reports.metrics_row(metrics, np_metrics, chash)]
    reports.write_metrics_csv(args.out, rows)
    if args.per_query:
        reports.write_per_query_csv(args.per_query, metrics)
    for row in rows:
        print(f"{row['policy']}: hit_ratio={row['hit_ratio']} "
              f"recall={row['recall']} miss_coverage={row['miss_coverage']} "
              f"relative_io={row['relative_io']}")
    return 0


def cmd_compare(args) -> int:
    out = reports.compare_runs(args.inputs, args.out)
    if out["warning"]:
        print(f"warning: {out['warning']}", file=sys.stderr)
    print(f"summary: {out['summary']}")
    print(f"figure:  {out['figure']}")
    return 0


def cmd_delta_report(args) -> int:
    w = trace_mod.load_trace(args.trace)
    out = reports.delta_report(w, args.out)
    print(f"report: {out['csv']}")
    print(f"figure: {out['figure']}")
    print("unique deltas:", json.dumps(out["unique"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefetchlab",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")
        sp.add_argument("--seed", type=int, help="override the seed")

    g = sub.add_parser("gen", help="generate a synthetic workload trace")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--queries", type=int, required=True)
    g.add_argument("--tables", type=int, default=4)
    g.add_argument("--blocks", type=int, default=1024)
    g.add_argument("--sf", type=float, default=1.0)
    g.add_argument("--zipf", type=float, default=1.0)
    g.add_argument("--session", type=int, default=20)
    g.add_argument("--patterns",
                   help="weights, e.g. sequential-scan=0.5,strided=0.5")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train artifacts from a trace")
    common(t)
    t.add_argument("--trace", required=True)
    t.add_argument("--out", required=True, help="artifact directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="run paired NP/policy simulations")
    common(s)
    s.add_argument("--trace", required=True)
    s.add_argument("--policy", required=True,
                   choices=["np", "la", "naive", "randr", "oracle",
                            "grasp", "grasp-nt"])
    s.add_argument("--artifacts", help="directory from `train`")
    s.add_argument("--out", required=True, help="metrics CSV path")
    s.add_argument("--per-query", help="optional per-query CSV path")
    s.add_argument("--k", type=int, help="prefetch size")
    s.add_argument("--budget-units", choices=["blocks", "x128"])
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="summarize multiple metrics CSVs")
    c.add_argument("inputs", nargs="+")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("delta-report", help="delta distribution report")
    d.add_argument("--trace", required=True)
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_delta_report)
    return p


def main(argv: List[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "k", None) is not None:
        args.set = (args.set or []) + [f"prefetch.k={args.k}"]
    if getattr(args, "budget_units", None):
        args.set = (args.set or []) + [
            f"prefetch.budget_units={args.budget_units}"]
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
