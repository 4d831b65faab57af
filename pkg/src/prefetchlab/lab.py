"""Experiment orchestration shared by the CLI and the test harness.

Holds the flat dotted-key configuration, the train pipeline (preprocess,
encode, vocabulary, model training, artifact files), and policy/simulation
assembly from artifacts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from . import trace as trace_mod
from .encoding import BlockEncoder
from .model import (PredictionModel, TrainConfig, load_checkpoint,
                    save_checkpoint, train)
from .pipeline import (ContextBuilder, build_dataset, collect_delta_sets,
                       make_model_config, unique_delta_study)
from .prefetcher import (GraspConfig, GraspPolicy, LookaheadPolicy,
                         NaivePolicy, NoPrefetchPolicy, OraclePolicy, Policy,
                         RandRPolicy)
from .simulator import ArrivalModel, CostModel, SimConfig
from .trace import TableCatalog, TableSpec, Workload
from .vocab import DeltaVocabulary, build_vocab

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "trace.lb_size": 32,
    "enc.dim": 16,
    "enc.text_dim": 4,
    "enc.ae_epochs": 50,
    "vocab.ds": 1500,
    "model.lookback": 2,
    "model.lr": 1e-4,
    "model.batch_size": 128,
    "model.max_epochs": 25,
    "model.patience": 3,
    "model.dropout": 0.2,
    "model.focal_alpha": 0.75,
    "model.focal_gamma": 3.0,
    "model.tau0": 0.1,
    "model.tau_alpha": 0.1,
    "model.tau_variant": "recall-max",
    "prefetch.k": 50,
    "prefetch.k_dc": 25,
    "prefetch.budget_units": "x128",
    "prefetch.strategy": "min",
    "prefetch.extent_size": 64,
    "prefetch.l_rr": 13,
    "vocab.lookup_window": 2000,
    "vocab.lookup_min_count": 2,
    "tune.l_tune": 200,
    "sim.cache_blocks": 4096,
    "sim.t_miss_ms": 1.0,
    "sim.t_hit_ms": 0.01,
    "sim.seq_discount": 0.5,
    "arrival.d_ms": 250.0,
    "arrival.mode": "fixed",
}


def make_config(overrides: Optional[Dict[str, object]] = None
                ) -> Dict[str, object]:
    cfg = dict(DEFAULTS)
    if "PREFETCHLAB_SEED" in os.environ:
        cfg["seed"] = int(os.environ["PREFETCHLAB_SEED"])
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise KeyError(f"unknown config key {key!r}")
        cfg[key] = type(DEFAULTS[key])(value) \
            if DEFAULTS[key] is not None else value
    return cfg


def parse_config_file(path: str) -> Dict[str, object]:
    out: Dict[str, object] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def train_cfg_from(config: Dict[str, object]) -> TrainConfig:
    return TrainConfig(
        learning_rate=float(config["model.lr"]),
        batch_size=int(config["model.batch_size"]),
        max_epochs=int(config["model.max_epochs"]),
        patience=int(config["model.patience"]),
        focal_alpha=float(config["model.focal_alpha"]),
        focal_gamma=float(config["model.focal_gamma"]),
        seed=int(config["seed"]),
    )


def grasp_cfg_from(config: Dict[str, object]) -> GraspConfig:
    return GraspConfig(
        k=int(config["prefetch.k"]),
        k_dc=int(config["prefetch.k_dc"]),
        budget_units=str(config["prefetch.budget_units"]),
        tau0=float(config["model.tau0"]),
        tau_alpha=float(config["model.tau_alpha"]),
        tau_variant=str(config["model.tau_variant"]),
        strategy=str(config["prefetch.strategy"]),
        l_tune=int(config["tune.l_tune"]),
        lookup_window=int(config["vocab.lookup_window"]),
        lookup_min_count=int(config["vocab.lookup_min_count"]),
    )


@dataclass
class TrainedArtifacts:
    encoder: BlockEncoder
    vocab: DeltaVocabulary
    builder: ContextBuilder
    model: PredictionModel
    loss_history: List[Tuple[float, float]]
    study: Dict[str, int]
    config: Dict[str, object]


def train_pipeline(w: Workload, config: Dict[str, object]) -> TrainedArtifacts:
    """Preprocess blocks, build the delta vocabulary, and train the model."""
    if not w.queries:
        raise ValueError("empty trace: nothing to train on")
    seed = int(config["seed"])
    encoder = BlockEncoder(w.catalog, seed=seed,
                           enc_dim=int(config["enc.dim"]),
                           text_dim=int(config["enc.text_dim"]),
                           ae_epochs=int(config["enc.ae_epochs"]))
    encoder.fit_all()
    strategy = str(config["prefetch.strategy"])
    delta_sets = collect_delta_sets(w, strategy)
    vocab = build_vocab(delta_sets, ds=int(config["vocab.ds"]))
    mcfg = make_model_config(encoder, vocab,
                             lookback=int(config["model.lookback"]),
                             dropout=float(config["model.dropout"]))
    builder = ContextBuilder(encoder, mcfg, strategy=strategy)
    windows, targets = build_dataset(w, builder, vocab)
    model = PredictionModel(mcfg, seed=seed)
    history = train(model, windows, targets, train_cfg_from(config))
    study = unique_delta_study(w)
    return TrainedArtifacts(encoder, vocab, builder, model, history, study,
                            config)


def save_artifacts(art: TrainedArtifacts, outdir: str) -> Dict[str, str]:
    os.makedirs(outdir, exist_ok=True)
    ckpt = os.path.join(outdir, "model.ckpt")
    meta = {
        "table_count": art.encoder.catalog.table_count,
        "ds": art.vocab.ds,
        "lookback": art.builder.cfg.lookback,
        "strategy": art.builder.strategy,
        "enc_dim": art.encoder.enc_dim,
        "text_dim": art.encoder.text_dim,
        "ae_epochs": art.encoder.ae_epochs,
        "seed": int(art.config["seed"]),
        "train_block_counts": [t.block_count
                               for t in art.encoder.catalog.tables],
        "lb_size": art.encoder.catalog.lb_size,
    }
    save_checkpoint(ckpt, art.model, extra_meta=meta)
    vocab_path = os.path.join(outdir, "vocab.txt")
    art.vocab.save(vocab_path)
    store_dir = os.path.join(outdir, "encodings")
    art.encoder.save_store(store_dir)
    return {"checkpoint": ckpt, "vocab": vocab_path, "store": store_dir}


def load_artifacts(artifact_dir: str, deploy_catalog: TableCatalog,
                   config: Dict[str, object]) -> TrainedArtifacts:
    """Rebuild artifacts against a deployment catalog.

    The encoder is refit deterministically on the training-time catalog
    shape (block contents derive from the seed alone), then pointed at the
    deployment catalog so new blocks are ingested through the drift path.
    """
    model, meta = load_checkpoint(os.path.join(artifact_dir, "model.ckpt"))
    vocab = DeltaVocabulary.load(os.path.join(artifact_dir, "vocab.txt"))
    if meta["table_count"] != deploy_catalog.table_count:
        raise ValueError(
            f"incompatible artifacts: checkpoint has {meta['table_count']} "
            f"tables, trace has {deploy_catalog.table_count}")
    if vocab.num_classes != model.cfg.num_delta_classes:
        raise ValueError("incompatible artifacts: vocabulary size differs "
                         "from the model delta head")
    train_catalog = TableCatalog(
        tables=[TableSpec(t.name, bc, t.columns)
                for t, bc in zip(deploy_catalog.tables,
                                 meta["train_block_counts"])],
        lb_size=meta["lb_size"])
    encoder = BlockEncoder(train_catalog, seed=meta["seed"],
                           enc_dim=meta["enc_dim"],
                           text_dim=meta["text_dim"],
                           ae_epochs=meta["ae_epochs"])
    encoder.fit_all()
    encoder.catalog = deploy_catalog
    builder = ContextBuilder(encoder, model.cfg, strategy=meta["strategy"])
    return TrainedArtifacts(encoder, vocab, builder, model, [], {}, config)


def build_policy(name: str, catalog: TableCatalog, config: Dict[str, object],
                 artifacts: Optional[TrainedArtifacts] = None) -> Policy:
    k = int(config["prefetch.k"])
    if name == "np":
        return NoPrefetchPolicy()
    if name == "la":
        return LookaheadPolicy(catalog, k)
    if name == "naive":
        return NaivePolicy(catalog, k,
                           strategy=str(config["prefetch.strategy"]))
    if name == "randr":
        return RandRPolicy(catalog,
                           extent_size=int(config["prefetch.extent_size"]),
                           l_rr=int(config["prefetch.l_rr"]))
    if name == "oracle":
        return OraclePolicy(catalog)
    if name in ("grasp", "grasp-nt"):
        if artifacts is None:
            raise ValueError(f"policy {name!r} needs trained artifacts")
        return GraspPolicy(artifacts.builder, artifacts.model,
                           artifacts.vocab, grasp_cfg_from(config),
                           train_cfg=train_cfg_from(config),
                           tuning_enabled=(name == "grasp"))
    raise ValueError(f"unknown policy {name!r}")


def sim_cfg_from(config: Dict[str, object], policy_name: str) -> SimConfig:
    gcfg = grasp_cfg_from(config)
    budget = gcfg.budget_native
    return SimConfig(
        cache_blocks=int(config["sim.cache_blocks"]),
        budget_native=budget,
        l_tune=int(config["tune.l_tune"]) if policy_name == "grasp" else 0,
        seed=int(config["seed"]),
    )


def cost_from(config: Dict[str, object]) -> CostModel:
    return CostModel(t_miss_ms=float(config["sim.t_miss_ms"]),
                     t_hit_ms=float(config["sim.t_hit_ms"]),
                     sequential_discount=float(config["sim.seq_discount"]))


def arrival_from(config: Dict[str, object]) -> ArrivalModel:
    return ArrivalModel(d_ms=float(config["arrival.d_ms"]),
                        mode=str(config["arrival.mode"]))
