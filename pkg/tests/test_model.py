"""Prediction network, focal loss, training, thresholds, checkpoints."""

import numpy as np
import pytest
import torch

from prefetchlab.model import (COUNT_BUCKETS, ContextWindow, ModelConfig,
                               PredictionModel, QueryContext, ThresholdState,
                               TrainConfig, TrainTargets, adapt_threshold,
                               bucket_midpoint, checkpoint_crc, count_bucket,
                               count_onehot, fine_tune, focal_loss,
                               gradient_check, load_checkpoint,
                               save_checkpoint, train, window_tensors)


def toy_config(**kw):
    base = dict(table_count=2, enc_dim=3, stmt_dim=5, num_delta_classes=7,
                lookback=2, res_embed=4, stmt_embed=3, bi_embed=4,
                count_embed=2, table_embed=2, merge_dim=6, lstm_hidden=4,
                dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_window(cfg, rng):
    w = ContextWindow(cfg)
    for _ in range(cfg.lookback):
        w.push(QueryContext(
            result_enc=rng.standard_normal(
                (cfg.table_count, cfg.enc_dim)).astype(np.float32),
            stmt=rng.standard_normal(cfg.stmt_dim).astype(np.float32),
            bi_delta=(rng.random(cfg.num_delta_classes) < 0.3
                      ).astype(np.float32),
            count_onehot=count_onehot(int(rng.integers(0, 5))),
            min_table_onehot=np.eye(cfg.table_count, dtype=np.float32)[
                int(rng.integers(cfg.table_count))],
        ))
    return w


def random_dataset(cfg, n, rng):
    windows = [random_window(cfg, rng) for _ in range(n)]
    targets = TrainTargets(
        tables=(rng.random((n, cfg.table_count)) < 0.5).astype(np.float32),
        count_buckets=rng.integers(0, COUNT_BUCKETS, size=n),
        deltas=(rng.random((n, cfg.num_delta_classes)) < 0.3
                ).astype(np.float32),
    )
    return windows, targets


def test_count_buckets():
    assert count_bucket(0) == 0
    assert count_bucket(1) == 1
    assert count_bucket(2) == 2
    assert count_bucket(3) == 2
    assert count_bucket(4) == 3
    assert count_bucket(10 ** 9) == COUNT_BUCKETS - 1
    assert bucket_midpoint(0) == 0
    assert bucket_midpoint(1) == 1
    assert bucket_midpoint(2) == 3  # sqrt(2*4) rounded
    assert count_onehot(5)[count_bucket(5)] == 1.0


def test_focal_loss_matches_manual_value():
    # single positive label at p=0.9
    val = focal_loss([1.0], [0.9], alpha=0.75, gamma=3.0)
    expect = 0.75 * (0.1 ** 3) * -np.log(0.9)
    assert abs(val - expect) < 1e-12


def test_focal_loss_shape_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        focal_loss([1.0, 0.0], [0.5], 1.0, 0.0)


def test_focal_loss_clipping_finite():
    assert np.isfinite(focal_loss([1.0, 0.0], [0.0, 1.0], 1.0, 0.0))


def test_forward_shapes_and_probability_ranges():
    cfg = toy_config()
    model = PredictionModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    t, c, d = model.predict(random_window(cfg, rng))
    assert t.shape == (cfg.table_count,)
    assert c.shape == (COUNT_BUCKETS,)
    assert d.shape == (cfg.num_delta_classes,)
    assert np.all((t >= 0) & (t <= 1)) and np.all((d >= 0) & (d <= 1))
    assert abs(c.sum() - 1.0) < 1e-5


def test_forward_shape_mismatch_names_component():
    cfg = toy_config()
    model = PredictionModel(cfg, seed=0)
    tensors = list(window_tensors([random_window(
        cfg, np.random.default_rng(0))]))
    tensors[1] = tensors[1][..., :-1]  # truncate the statement component
    with pytest.raises(ValueError, match="component stmt"):
        model(*tensors)


def test_predict_is_deterministic_despite_dropout():
    cfg = toy_config(dropout=0.5)
    model = PredictionModel(cfg, seed=0)
    w = random_window(cfg, np.random.default_rng(1))
    a = model.predict(w)
    b = model.predict(w)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_train_reduces_loss_and_is_deterministic():
    cfg = toy_config()
    rng = np.random.default_rng(2)
    windows, targets = random_dataset(cfg, 60, rng)
    tc = TrainConfig(learning_rate=1e-2, batch_size=16, max_epochs=10,
                     patience=10, seed=3)
    m1 = PredictionModel(cfg, seed=4)
    h1 = train(m1, windows, targets, tc)
    assert h1[-1][0] < h1[0][0]
    m2 = PredictionModel(cfg, seed=4)
    train(m2, windows, targets, tc)
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)


def test_train_empty_dataset():
    cfg = toy_config()
    with pytest.raises(ValueError, match="empty dataset"):
        train(PredictionModel(cfg), [],
              TrainTargets(np.zeros((0, 2)), np.zeros(0, dtype=np.int64),
                           np.zeros((0, 7))), TrainConfig())


def test_fine_tune_touches_only_heads():
    cfg = toy_config()
    rng = np.random.default_rng(5)
    windows, targets = random_dataset(cfg, 40, rng)
    model = PredictionModel(cfg, seed=6)
    train(model, windows, targets,
          TrainConfig(learning_rate=1e-2, batch_size=16, max_epochs=3,
                      patience=5, seed=7))
    before = {k: v.detach().clone() for k, v in model.state_dict().items()}
    fine_tune(model, windows, targets, remap=[(2, None, 9)],
              cfg=TrainConfig(fine_tune_epochs=3, fine_tune_lr=1e-3, seed=8))
    after = model.state_dict()
    for name in after:
        frozen = not name.startswith(("table_head", "count_head",
                                      "delta_head"))
        if frozen:
            assert torch.equal(before[name], after[name]), name
    assert not torch.equal(before["delta_head.weight"],
                           after["delta_head.weight"])


def test_gradient_check_passes_on_toy_net():
    cfg = toy_config()
    rng = np.random.default_rng(9)
    windows, targets = random_dataset(cfg, 4, rng)
    model = PredictionModel(cfg, seed=10)
    err = gradient_check(model, windows, targets,
                         TrainConfig(), h=1e-4)
    assert err < 1e-4


def test_adapt_threshold_recall_max():
    st = ThresholdState(tau=0.5, alpha=0.1)
    # accessed table below tau -> false negative, tau drops
    st2 = adapt_threshold(st, np.array([0.3, 0.9]), [1, 0])
    assert st2.tau == pytest.approx(0.4)
    # no false negatives -> tau creeps up
    st3 = adapt_threshold(st2, np.array([0.45, 0.9]), [1, 0])
    assert st3.tau == pytest.approx(0.41)


def test_adapt_threshold_clamps():
    st = ThresholdState(tau=0.05, alpha=0.1)
    st2 = adapt_threshold(st, np.array([0.0]), [1])
    assert st2.tau == ThresholdState.TAU_MIN
    st = ThresholdState(tau=0.999, alpha=0.1)
    st2 = adapt_threshold(st, np.array([1.0]), [1])
    assert st2.tau == ThresholdState.TAU_MAX


def test_adapt_threshold_literal_variant():
    st = ThresholdState(tau=0.5, alpha=0.1, variant="literal")
    # tau below the minimum accessed probability: the decrease branch fires
    # but there are no false negatives, so tau is unchanged
    st2 = adapt_threshold(st, np.array([0.8]), [1])
    assert st2.tau == pytest.approx(0.5)
    # tau at/above the minimum accessed probability -> creep up
    st3 = adapt_threshold(st, np.array([0.4]), [1])
    assert st3.tau == pytest.approx(0.51)


def test_checkpoint_round_trip(tmp_path):
    cfg = toy_config()
    model = PredictionModel(cfg, seed=11)
    p = tmp_path / "m.ckpt"
    save_checkpoint(str(p), model, extra_meta={"note": "x"})
    back, meta = load_checkpoint(str(p))
    assert meta["note"] == "x"
    for a, b in zip(model.parameters(), back.parameters()):
        assert torch.equal(a, b)
    assert checkpoint_crc(str(p)) >= 0


def test_checkpoint_crc_detects_corruption(tmp_path):
    cfg = toy_config()
    p = tmp_path / "m.ckpt"
    save_checkpoint(str(p), PredictionModel(cfg, seed=12))
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(str(p))
