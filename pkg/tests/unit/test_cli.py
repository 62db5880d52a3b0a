# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

import pandas as pd
import pytest

from regionboot.cli import build_parser, main
from regionboot.exceptions import ExitStatus
from regionboot.model import CallableModel


@pytest.fixture(scope="function")
def out_dir(tmp_path):
    """Return an output directory below the test's temporary path."""
    return tmp_path / "out"


class TestParser:
    """Tests for the argument parser."""

    def test_unset_flags_are_none(self):
        """Test that flags left out do not override lower layers."""
        args = build_parser().parse_args(["analyze"])
        assert args.b is None and args.model is None and args.config is None

    def test_command_flags(self):
        """Test that command-specific flags belong to their command."""
        args = build_parser().parse_args(["coverage", "--trials", "10", "--method", "p2"])
        assert args.trials == "10" and args.method == "p2"
        with pytest.raises(SystemExit):
            build_parser().parse_args(["analyze", "--trials", "10"])

    def test_command_required(self):
        """Test that a command must be given."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestAnalyze:
    """Tests for the analyze command."""

    def test_oracle(self, out_dir, capsys):
        """Test an oracle analysis of the spherical example."""
        status = main(
            [
                "analyze",
                "--mode", "oracle",
                "--xbar-norm2", "2.680",
                "--methods", "p0,p1,exact",
                "--out-dir", str(out_dir),
            ]
        )
        assert status == ExitStatus.OK
        pvalues = pd.read_csv(out_dir / "pvalues.csv")
        assert list(pvalues["method"]) == ["p0", "p1", "exact"]
        assert pvalues["alpha"][1] == pytest.approx(0.0529, abs=3e-4)
        assert (out_dir / "bootstrap_table.csv").exists()
        assert (out_dir / "fit_report.csv").exists()
        output = capsys.readouterr().out
        assert "p1: 0.05" in output
        assert "master_seed" not in output

    def test_monte_carlo_seed(self, out_dir):
        """Test that the seed is recorded with a Monte Carlo table."""
        status = main(
            [
                "analyze",
                "--target", "0.05",
                "--b", "200",
                "--seed", "5",
                "--methods", "p0",
                "--out-dir", str(out_dir),
            ]
        )
        assert status == ExitStatus.OK
        assert "# master_seed: 5" in (out_dir / "bootstrap_table.csv").read_text()

    def test_generated_seed_is_printed(self, out_dir, capsys):
        """Test that a generated seed is reported so the run can be repeated."""
        status = main(
            ["analyze", "--target", "0.05", "--b", "100", "--methods", "p0",
             "--out-dir", str(out_dir)]
        )
        assert status == ExitStatus.OK
        seed = capsys.readouterr().out.split("master_seed=")[1].split()[0]
        assert f"# master_seed: {seed}" in (out_dir / "bootstrap_table.csv").read_text()

    def test_table_in(self, out_dir, tmp_path):
        """Test the analysis of counts produced elsewhere."""
        table = tmp_path / "counts.csv"
        table.write_text(
            "k,tau1,tau2,tau3,B,count\n"
            "1,1.826,,,10000,359\n"
            "1,1.291,,,10000,205\n"
            "1,1.0,,,10000,85\n"
            "1,0.816,,,10000,28\n"
            "1,0.690,,,10000,8\n"
        )
        status = main(
            ["analyze", "--table-in", str(table), "--methods", "p0,p1", "--out-dir", str(out_dir)]
        )
        assert status == ExitStatus.OK
        pvalues = pd.read_csv(out_dir / "pvalues.csv")
        assert pvalues["alpha"][0] == pytest.approx(0.0085)
        assert pvalues["alpha"][1] == pytest.approx(0.053, abs=0.006)

    def test_config_file(self, out_dir, tmp_path):
        """Test that a config file supplies the options flags leave out."""
        config = tmp_path / "run.conf"
        config.write_text(
            "model = exponential\np = 1\nmode = oracle\ntarget = 0.05\nmethods = p0,exact\n"
        )
        status = main(["analyze", "--config", str(config), "--out-dir", str(out_dir)])
        assert status == ExitStatus.OK
        pvalues = pd.read_csv(out_dir / "pvalues.csv")
        assert pvalues["alpha"][0] == pytest.approx(0.1115, abs=5e-4)


class TestOtherCommands:
    """Tests for the table2, curve and coverage commands."""

    def test_table2(self, out_dir):
        """Test one row of the example table."""
        status = main(
            ["table2", "--mode", "oracle", "--rows", "normal:10:0.05", "--out-dir", str(out_dir)]
        )
        assert status == ExitStatus.OK
        frame = pd.read_csv(out_dir / "table2.csv")
        assert len(frame) == 1
        assert frame["alpha1"][0] == pytest.approx(5.29, abs=0.03)

    def test_curve(self, out_dir):
        """Test the one-step curve of the spherical example."""
        status = main(
            ["curve", "--mode", "oracle", "--target", "0.05", "--out-dir", str(out_dir)]
        )
        assert status == ExitStatus.OK
        frame = pd.read_csv(out_dir / "curve.csv")
        assert (frame["kind"] == "cell").sum() == 5
        assert len(frame) == 106

    def test_coverage(self, out_dir, capsys):
        """Test the rejection frequency of the exact p-value."""
        status = main(
            [
                "coverage",
                "--method", "exact",
                "--trials", "200",
                "--seed", "3",
                "--out-dir", str(out_dir),
            ]
        )
        assert status == ExitStatus.OK
        frame = pd.read_csv(out_dir / "coverage.csv")
        assert frame["trials"][0] == 200
        assert "exact:" in capsys.readouterr().out


class TestExitStatus:
    """Tests for the exit status of failing runs."""

    @pytest.mark.parametrize(
        "argv",
        [
            ["analyze", "--b", "5"],
            ["analyze", "--mode", "oracle"],
            ["analyze", "--model", "exponential"],
            ["analyze", "--log-level", "loud"],
            ["table2", "--rows", "gamma:10:0.05", "--mode", "oracle"],
        ],
    )
    def test_config_errors(self, argv, out_dir):
        """Test that invalid configurations exit with the config status."""
        assert main(argv + ["--out-dir", str(out_dir)]) == ExitStatus.CONFIG

    def test_missing_capability(self, out_dir, mocker):
        """Test that a model lacking an oracle exits with the capability status."""
        plain = CallableModel("plain", 4, 10.0, lambda c, t, s: c, lambda p: p[:, 0] < 0)
        mocker.patch("regionboot.cli.build_model", return_value=plain)
        argv = ["analyze", "--mode", "oracle", "--xbar", "1,0,0,0", "--out-dir", str(out_dir)]
        assert main(argv) == ExitStatus.CAPABILITY

    def test_numerical_error(self, out_dir, tmp_path):
        """Test that a degenerate fit exits with the numerical status."""
        table = tmp_path / "counts.csv"
        table.write_text("k,tau1,B,count\n1,1.0,100,10\n1,1.0,100,12\n")
        argv = ["analyze", "--table-in", str(table), "--methods", "p1", "--out-dir", str(out_dir)]
        assert main(argv) == ExitStatus.NUMERICAL
