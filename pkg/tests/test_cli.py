"""CLI subcommands: config strictness, exit codes, determinism, charts."""

import numpy as np
import pytest

import synthdigits
from qflsim import cli, report
from qflsim.errors import ConfigError, DataError

SMALL_CONFIG = """\
[experiment]
seed = 5
rounds = 2

[data]
images = train-images-idx3-ubyte
labels = train-labels-idx1-ubyte
train_per_client = 24
test_samples = 40

[federation]
servers = 3
clients_per_server = 2
topology = ring

[training]
epochs = 1
batch = 16
"""


@pytest.fixture()
def workspace(tmp_path):
    synthdigits.write_idx_corpus(tmp_path, n_per_class=45, seed=7)
    config = tmp_path / "exp.ini"
    config.write_text(SMALL_CONFIG)
    return tmp_path, config


# =============================================================================
# config handling
# =============================================================================

def test_unknown_key_rejected(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[experiment]\nseeed = 3\n")
    with pytest.raises(ConfigError):
        cli.load_config(config)


def test_unknown_section_rejected(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[quantum]\nqubits = 4\n")
    with pytest.raises(ConfigError):
        cli.load_config(config)


def test_bad_type_rejected(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[experiment]\nrounds = soon\n")
    with pytest.raises(ConfigError):
        cli.load_config(config)


def test_defaults_match_module_defaults(tmp_path):
    config = tmp_path / "empty.ini"
    config.write_text("")
    values = cli.load_config(config)
    assert values[("experiment", "rounds")] == 100
    assert values[("training", "lr")] == 0.01
    assert values[("training", "batch")] == 32
    assert values[("training", "epochs")] == 10
    assert values[("federation", "servers")] == 3
    assert values[("federation", "clients_per_server")] == 5
    assert values[("noise", "depolarizing_1q")] == 0.001
    assert values[("noise", "depolarizing_2q")] == 0.01
    assert values[("noise", "measurement_flip")] == 0.01
    assert values[("data", "classes")] == (0, 1, 2, 3)
    assert values[("circuit", "qubits")] == 4
    assert values[("circuit", "layers")] == 6


def test_small_qubit_count_rejected(tmp_path):
    config = tmp_path / "q2.ini"
    config.write_text("[circuit]\nqubits = 2\n\n[data]\nclasses = 0,1\n")
    with pytest.raises(ConfigError):
        cli.build_context(cli.load_config(config))


def test_desk_profile_overrides(tmp_path):
    config = tmp_path / "empty.ini"
    config.write_text("")
    values = cli.load_config(config, cli._PROFILES["desk"])
    assert values[("experiment", "rounds")] == 20
    assert values[("data", "train_per_client")] == 500


# =============================================================================
# ingest
# =============================================================================

def test_ingest_writes_cache(workspace, capsys):
    tmp_path, _ = workspace
    code = cli.main([
        "ingest",
        "--images", str(tmp_path / "train-images-idx3-ubyte"),
        "--labels", str(tmp_path / "train-labels-idx1-ubyte"),
        "--out", str(tmp_path / "cache"),
    ])
    assert code == 0
    cache = np.load(tmp_path / "cache" / "processed.npz")
    assert cache["features"].shape[1] == 8
    assert "kept" in capsys.readouterr().out


# =============================================================================
# run
# =============================================================================

def test_run_writes_outputs_and_verifies(workspace):
    tmp_path, config = workspace
    out = tmp_path / "out"
    code = cli.main(["run", "--config", str(config), "--out", str(out)])
    assert code == 0
    rows = report.parse_metrics((out / "metrics.csv").read_text())
    assert [r.round_index for r in rows] == [0, 1, 2]
    assert (out / "summary.txt").is_file()
    assert (out / "config.echo.ini").is_file()
    assert cli.main(["verify", "--chains", str(out / "ledger")]) == 0


def test_run_zero_rounds_reports_initial_eval(workspace, tmp_path):
    _, config = workspace
    text = config.read_text().replace("rounds = 2", "rounds = 0")
    config.write_text(text)
    out = tmp_path / "out0"
    assert cli.main(["run", "--config", str(config), "--out", str(out)]) == 0
    rows = report.parse_metrics((out / "metrics.csv").read_text())
    assert [r.round_index for r in rows] == [0]


def test_run_deterministic_across_workers(workspace, tmp_path):
    _, config = workspace
    outputs = []
    for tag, workers in (("a", 1), ("b", 4), ("c", 1)):
        out = tmp_path / f"det-{tag}"
        code = cli.main([
            "run", "--config", str(config), "--out", str(out),
            "--workers", str(workers),
        ])
        assert code == 0
        outputs.append((out / "metrics.csv").read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_run_missing_config_exits_2(tmp_path):
    assert cli.main([
        "run", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "o"),
    ]) == 2


def test_run_missing_dataset_exits_2(tmp_path):
    config = tmp_path / "exp.ini"
    config.write_text(SMALL_CONFIG)
    assert cli.main([
        "run", "--config", str(config), "--out", str(tmp_path / "o"),
    ]) == 2


# =============================================================================
# compare
# =============================================================================

def test_compare_two_methods(workspace, tmp_path):
    _, config = workspace
    out = tmp_path / "cmp"
    code = cli.main([
        "compare", "--config", str(config), "--out", str(out),
        "--methods", "qnn_central,dense_central",
    ])
    assert code == 0
    rows = report.parse_metrics((out / "metrics.csv").read_text())
    assert {r.method for r in rows} == {"qnn_central", "dense_central"}
    summary = (out / "summary.txt").read_text()
    assert "qnn_central" in summary and "dense_central" in summary


def test_compare_deduplicates_with_warning(workspace, tmp_path, capsys):
    _, config = workspace
    out = tmp_path / "cmp2"
    code = cli.main([
        "compare", "--config", str(config), "--out", str(out),
        "--methods", "dense_central,dense_central,qnn_central",
    ])
    assert code == 0
    assert "duplicate" in capsys.readouterr().err


def test_compare_single_method_exits_2(workspace, tmp_path):
    _, config = workspace
    assert cli.main([
        "compare", "--config", str(config), "--out", str(tmp_path / "x"),
        "--methods", "dqfl",
    ]) == 2


def test_compare_unknown_method_exits_2(workspace, tmp_path):
    _, config = workspace
    assert cli.main([
        "compare", "--config", str(config), "--out", str(tmp_path / "x"),
        "--methods", "dqfl,cnn",
    ]) == 2


# =============================================================================
# verify
# =============================================================================

def test_verify_flags_tampered_byte(workspace, tmp_path):
    _, config = workspace
    out = tmp_path / "vrf"
    assert cli.main(["run", "--config", str(config), "--out", str(out)]) == 0
    target = sorted((out / "ledger" / "chains").glob("*.chain"))[0]
    blob = bytearray(target.read_bytes())
    blob[len(blob) // 2] ^= 0x10
    target.write_bytes(bytes(blob))
    assert cli.main(["verify", "--chains", str(out / "ledger")]) == 1


def test_verify_empty_dir_exits_2(tmp_path):
    assert cli.main(["verify", "--chains", str(tmp_path / "empty")]) == 2


# =============================================================================
# rollback
# =============================================================================

def test_rollback_resumes_and_appends(workspace, tmp_path):
    _, config = workspace
    out = tmp_path / "rb"
    assert cli.main(["run", "--config", str(config), "--out", str(out)]) == 0
    code = cli.main([
        "rollback", "--chains", str(out / "ledger"), "--config", str(config),
        "--round", "1", "--rounds", "2", "--out", str(out),
    ])
    assert code == 0
    segment = out / "metrics.rollback-1.csv"
    rows = report.parse_metrics(segment.read_text())
    assert [r.round_index for r in rows] == [2, 3]
    assert cli.main(["verify", "--chains", str(out / "ledger")]) == 0


def test_rollback_past_head_exits_1(workspace, tmp_path):
    _, config = workspace
    out = tmp_path / "rb2"
    assert cli.main(["run", "--config", str(config), "--out", str(out)]) == 0
    assert cli.main([
        "rollback", "--chains", str(out / "ledger"), "--config", str(config),
        "--round", "9", "--out", str(out),
    ]) == 1


# =============================================================================
# report
# =============================================================================

def test_report_emits_two_charts(workspace, tmp_path):
    _, config = workspace
    out = tmp_path / "rep"
    assert cli.main(["run", "--config", str(config), "--out", str(out)]) == 0
    charts = tmp_path / "charts"
    code = cli.main([
        "report", "--metrics", str(out / "metrics.csv"), "--out", str(charts),
    ])
    assert code == 0
    acc = (charts / "accuracy.svg").read_text()
    assert acc.startswith("<svg") and "polyline" in acc
    assert (charts / "loss.svg").is_file()


def test_report_three_series_charts(tmp_path):
    rows = []
    for method in ("star", "ring", "random"):
        for r in range(4):
            rows.append(report.MetricsRow(r, method, 0.3 + 0.1 * r, 1.2 - 0.1 * r, 5))
    metrics = tmp_path / "three.csv"
    metrics.write_text(report.format_rows(rows))
    charts = tmp_path / "charts3"
    assert cli.main(["report", "--metrics", str(metrics), "--out", str(charts)]) == 0
    for name in ("accuracy.svg", "loss.svg"):
        svg = (charts / name).read_text()
        assert svg.count("<polyline") == 3


def test_report_malformed_rows_exit_2_with_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text(report.CSV_HEADER + "\n0,dqfl,0.5,notafloat,3\n")
    assert cli.main(["report", "--metrics", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_report_empty_rows_exit_2(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text(report.CSV_HEADER + "\n")
    assert cli.main(["report", "--metrics", str(empty), "--out", str(tmp_path)]) == 2


def test_metrics_roundtrip():
    rows = [
        report.MetricsRow(0, "dqfl", 0.25, 1.3862943611198906, 0),
        report.MetricsRow(1, "dqfl", 0.517, 1.201, 41),
    ]
    parsed = report.parse_metrics(report.format_rows(rows))
    assert parsed == rows
