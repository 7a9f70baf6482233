"""
CLI tests using Click's testing utilities.

Tests option handling, exit codes and the artifacts each command writes.
"""

import csv

import pytest
from click.testing import CliRunner

from cli.main import EXIT_SUCCESS, EXIT_USAGE_ERROR, cli
from src import __version__


@pytest.fixture
def runner():
    """Click CLI test runner."""
    return CliRunner()


@pytest.fixture
def invoke(runner, config_file, temp_dir):
    """Invoke the CLI with the small configuration and an output directory under ``temp_dir``."""
    path = config_file()

    def run(*args, out="out", env=None):
        return runner.invoke(cli, ["--config", str(path), "--out", str(temp_dir / out), *args], env=env)

    return run


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


@pytest.mark.cli
class TestCLIMain:
    """Test top-level options."""

    def test_help(self, runner):
        result = runner.invoke(cli, ["--help"])
        assert result.exit_code == EXIT_SUCCESS
        assert "EdgeFM" in result.output
        for command in ("customize", "simulate", "table", "probe-replay", "cloud-serve", "edge-run"):
            assert command in result.output

    def test_version(self, runner):
        result = runner.invoke(cli, ["--version"])
        assert result.exit_code == EXIT_SUCCESS
        assert f"edgefm v{__version__}" in result.output

    def test_no_command_prints_help(self, runner):
        result = runner.invoke(cli, [])
        assert result.exit_code == EXIT_SUCCESS
        assert "Commands:" in result.output

    def test_verbose_flag(self, runner):
        assert runner.invoke(cli, ["-vv", "--help"]).exit_code == EXIT_SUCCESS

    def test_missing_config_file(self, runner, temp_dir):
        result = runner.invoke(cli, ["--config", str(temp_dir / "absent.toml"), "table"])
        assert result.exit_code == EXIT_USAGE_ERROR

    def test_unknown_option(self, runner):
        assert runner.invoke(cli, ["simulate", "--bogus"]).exit_code == EXIT_USAGE_ERROR

    def test_invalid_configuration(self, invoke):
        result = invoke("table", env={"EDGEFM_TRAIN_LAM": "2.0"})
        assert result.exit_code == EXIT_USAGE_ERROR
        assert "train.lam" in result.output

    def test_zero_live_probe_interval_is_a_configuration_error(self, invoke):
        result = invoke("edge-run", env={"EDGEFM_LIVE_PROBE_EVERY": "0"})
        assert result.exit_code == EXIT_USAGE_ERROR
        assert "live.probe_every" in result.output


@pytest.mark.cli
class TestCustomizeCommand:
    def test_single_variant(self, invoke, temp_dir):
        result = invoke("customize", "--variant", "semantic")
        assert result.exit_code == EXIT_SUCCESS, result.output
        out_dir = temp_dir / "out" / "customize"
        assert sorted(p.name for p in out_dir.glob("*.ckpt")) == ["semantic.ckpt"]
        rows = read_rows(out_dir / "comparison.csv")
        assert rows[0] == ["variant", "arch_id", "samples", "final_loss", "holdout_accuracy", "fm_holdout_accuracy"]
        assert rows[1][:3] == ["semantic", "mobilenet_v2", "60"]
        assert len(read_rows(out_dir / "semantic_training.csv")) == 1 + 5
        assert (out_dir / "config.effective.toml").is_file()

    def test_all_configured_variants(self, invoke, temp_dir):
        result = invoke("customize")
        assert result.exit_code == EXIT_SUCCESS, result.output
        rows = read_rows(temp_dir / "out" / "customize" / "comparison.csv")
        assert [row[0] for row in rows[1:]] == ["semantic", "vanilla_kd", "hard_ft"]

    def test_same_seed_same_artifacts(self, invoke, temp_dir):
        assert invoke("customize", "--variant", "semantic", out="a").exit_code == EXIT_SUCCESS
        assert invoke("customize", "--variant", "semantic", out="b").exit_code == EXIT_SUCCESS
        for name in ("comparison.csv", "semantic_training.csv", "semantic.ckpt"):
            first = (temp_dir / "a" / "customize" / name).read_bytes()
            assert first == (temp_dir / "b" / "customize" / name).read_bytes()

    def test_seed_override_recorded(self, runner, config_file, temp_dir):
        result = runner.invoke(
            cli,
            ["--config", str(config_file()), "--seed", "9", "--out", str(temp_dir / "out"), "customize", "--variant", "hard_ft"],
        )
        assert result.exit_code == EXIT_SUCCESS, result.output
        effective = (temp_dir / "out" / "customize" / "config.effective.toml").read_text()
        assert "seed = 9" in effective

    def test_unknown_variant(self, invoke):
        assert invoke("customize", "--variant", "magic").exit_code == EXIT_USAGE_ERROR


@pytest.mark.cli
class TestTableCommand:
    def test_writes_monotone_table(self, invoke, temp_dir):
        result = invoke("table")
        assert result.exit_code == EXIT_SUCCESS, result.output
        assert "monotone_r=True monotone_acc=True" in result.output
        rows = read_rows(temp_dir / "out" / "table" / "threshold_table.csv")
        body = [row for row in rows if row and not row[0].startswith("#")][1:]
        assert len(body) == 19


@pytest.mark.cli
class TestProbeReplayCommand:
    def test_replays_trace(self, invoke, temp_dir):
        trace = temp_dir / "trace.csv"
        trace.write_text("t_seconds,bandwidth_mbps\n0,123\n20,2\n")
        result = invoke("probe-replay", "--trace", str(trace))
        assert result.exit_code == EXIT_SUCCESS, result.output
        rows = read_rows(temp_dir / "out" / "probe_replay" / "decisions.csv")
        assert rows[0] == ["t_seconds", "B_mbps", "thre", "estimated_latency_ms"]
        assert len(rows) == 1 + 40
        assert rows[1][:3] == ["0.000", "123.000000", "0.95"]
        assert float(rows[-1][2]) < 0.95

    def test_missing_trace(self, invoke):
        result = invoke("probe-replay", "--trace", "missing.csv")
        assert result.exit_code == EXIT_USAGE_ERROR
        assert "missing.csv" in result.output


@pytest.mark.cli
class TestSimulateCommand:
    def test_writes_report(self, invoke, temp_dir):
        result = invoke("simulate")
        assert result.exit_code == EXIT_SUCCESS, result.output
        out_dir = temp_dir / "out" / "simulate"
        assert (out_dir / "summary.json").is_file()
        assert read_rows(out_dir / "report.csv")[0][:3] == ["kind", "t", "sample_id"]
        audit = read_rows(out_dir / "audit.csv")
        assert audit[0] == ["time", "sample_id", "unc", "thre", "route", "predicted_class"]
        assert len(audit) > 1
        decisions = read_rows(out_dir / "decisions.csv")
        assert decisions[0] == ["t_seconds", "B_mbps", "thre", "estimated_latency_ms"]
        assert decisions[1][0] == "0.000"

    def test_audit_logs_can_be_disabled(self, invoke, temp_dir):
        result = invoke("simulate", env={"EDGEFM_OUTPUT_WRITE_AUDIT_LOG": "false"})
        assert result.exit_code == EXIT_SUCCESS, result.output
        out_dir = temp_dir / "out" / "simulate"
        assert (out_dir / "report.csv").is_file()
        assert not (out_dir / "audit.csv").exists()
        assert not (out_dir / "decisions.csv").exists()

    def test_missing_trace(self, invoke):
        assert invoke("simulate", "--trace", "missing.csv").exit_code == EXIT_USAGE_ERROR
