"""End-to-end CLI flows and report outputs."""

import pytest

from prefetchlab import lab, reports
from prefetchlab.cli import main
from prefetchlab.simulator import RunMetrics


def run_cli(args):
    return main(args)


def test_config_precedence_and_env_seed(monkeypatch):
    cfg = lab.make_config({})
    assert cfg["seed"] == 0
    monkeypatch.setenv("PREFETCHLAB_SEED", "17")
    assert lab.make_config({})["seed"] == 17
    # explicit override beats the environment
    assert lab.make_config({"seed": 3})["seed"] == 3
    with pytest.raises(KeyError):
        lab.make_config({"no.such.key": 1})


def test_parse_config_file(tmp_path):
    p = tmp_path / "lab.cfg"
    p.write_text("# comment\nprefetch.k = 7\n\nsim.cache_blocks=99\n")
    got = lab.parse_config_file(str(p))
    assert got == {"prefetch.k": "7", "sim.cache_blocks": "99"}


def test_gen_writes_trace(tmp_path, capsys):
    out = tmp_path / "w.trace"
    rc = run_cli(["gen", "--out", str(out), "--queries", "50",
                  "--tables", "2", "--blocks", "128", "--seed", "1"])
    assert rc == 0
    assert out.exists()
    assert "50 queries" in capsys.readouterr().out


def test_gen_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a.trace", tmp_path / "b.trace"
    args = ["gen", "--queries", "40", "--tables", "2", "--blocks", "128",
            "--seed", "5"]
    assert run_cli(args + ["--out", str(a)]) == 0
    assert run_cli(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        run_cli(["simulate", "--policy", "warp"])
    assert e.value.code == 2


def test_runtime_error_exit_code(tmp_path, capsys):
    rc = run_cli(["train", "--trace", str(tmp_path / "missing.trace"),
                  "--out", str(tmp_path / "art")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_simulate_requires_artifacts_for_grasp(tmp_path, capsys):
    trace = tmp_path / "w.trace"
    run_cli(["gen", "--out", str(trace), "--queries", "30", "--tables", "2",
             "--blocks", "128", "--seed", "1"])
    rc = run_cli(["simulate", "--trace", str(trace), "--policy", "grasp",
                  "--out", str(tmp_path / "m.csv")])
    assert rc == 1
    assert "requires --artifacts" in capsys.readouterr().err


def test_full_pipeline_train_simulate_compare_delta(tmp_path, capsys):
    trace = tmp_path / "w.trace"
    art = tmp_path / "art"
    fast = ["--set", "enc.ae_epochs=3", "--set", "model.max_epochs=2",
            "--set", "vocab.ds=8", "--set", "trace.lb_size=8"]
    assert run_cli(["gen", "--out", str(trace), "--queries", "120",
                    "--tables", "2", "--blocks", "256", "--seed", "2"] +
                   fast) == 0
    assert run_cli(["train", "--trace", str(trace), "--out", str(art)] +
                   fast) == 0
    assert (art / "model.ckpt").exists()
    assert (art / "vocab.txt").exists()
    assert (art / "training_loss.png").exists()  # rendered figure

    csvs = []
    for policy in ("la", "grasp"):
        out = tmp_path / f"{policy}.csv"
        args = ["simulate", "--trace", str(trace), "--policy", policy,
                "--out", str(out), "--k", "2"] + fast
        if policy == "grasp":
            args += ["--artifacts", str(art)]
        assert run_cli(args) == 0
        assert out.exists()
        csvs.append(str(out))

    cmp_dir = tmp_path / "cmp"
    assert run_cli(["compare", *csvs, "--out", str(cmp_dir)]) == 0
    assert (cmp_dir / "summary.csv").exists()
    assert (cmp_dir / "summary.png").exists()

    rep_dir = tmp_path / "rep"
    assert run_cli(["delta-report", "--trace", str(trace),
                    "--out", str(rep_dir)]) == 0
    assert (rep_dir / "deltas.csv").exists()
    assert (rep_dir / "deltas.png").exists()
    out = capsys.readouterr().out
    assert "unique deltas" in out


def test_metrics_csv_round_trip(tmp_path):
    m = RunMetrics(policy="np", hits=3, misses=1, accessed_blocks=4,
                   io_time_ms=1.5, per_query_latency_ms=[1.0],
                   per_query_hits=[3], per_query_misses=[1],
                   query_types=["select"])
    row = reports.metrics_row(m, m, "abc")
    path = tmp_path / "m.csv"
    reports.write_metrics_csv(str(path), [row])
    back = reports.read_metrics_csv(str(path))
    assert back[0]["policy"] == "np"
    assert back[0]["hit_ratio"] == "0.75"
    # None-valued metrics serialize as empty strings, not zeros
    empty = reports.metrics_row(RunMetrics(policy="x"), None, "abc")
    p2 = tmp_path / "empty.csv"
    reports.write_metrics_csv(str(p2), [empty])
    assert reports.read_metrics_csv(str(p2))[0]["hit_ratio"] == ""


def test_read_metrics_csv_rejects_other_files(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="not a metrics CSV"):
        reports.read_metrics_csv(str(p))


def test_compare_warns_on_config_hash_mismatch(tmp_path, capsys):
    rows = []
    for i, h in enumerate(("aaa", "bbb")):
        m = RunMetrics(policy=f"p{i}", hits=1, misses=1, accessed_blocks=2)
        path = tmp_path / f"{i}.csv"
        reports.write_metrics_csv(str(path), [reports.metrics_row(m, m, h)])
        rows.append(str(path))
    assert run_cli(["compare", *rows, "--out", str(tmp_path / "c")]) == 0
    assert "warning" in capsys.readouterr().err
