import json

import pandas as pd
import pytest

from app.cli import main, parse_seeds, parse_weights
from app.core.exceptions import ConfigurationError


def test_parse_seeds():
    """Test single seeds, ranges and lists."""
    assert parse_seeds("3") == [3]
    assert parse_seeds("0-3") == [0, 1, 2, 3]
    assert parse_seeds("1,4,7") == [1, 4, 7]
    with pytest.raises(ConfigurationError):
        parse_seeds("a-b")


def test_parse_weights():
    """Test presets and explicit vectors."""
    assert parse_weights(None, 2) is None
    assert parse_weights("uniform", 2) == [0.5, 0.5]
    assert parse_weights("0.2,0.8", 2) == [0.2, 0.8]
    with pytest.raises(ConfigurationError):
        parse_weights("heavy", 2)


def test_generate_then_solve_inap(tmp_path, capsys):
    """Test the generate and solve-inap subcommands writing their files."""
    # Setup
    scenario = tmp_path / "scenario.json"
    trace = tmp_path / "trace.csv"
    solution = tmp_path / "solution.json"
    assert main(["generate", "--K", "1", "--N", "2", "--seed", "4", "--out", str(scenario)]) == 0
    capsys.readouterr()

    # Verify
    code = main(
        ["solve-inap", "--scenario", str(scenario), "--max-iter", "3", "--trace", str(trace), "--out", str(solution)]
    )
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["solver"] == "inap"
    assert summary["power_feasible"] is True
    assert list(pd.read_csv(trace).columns) == ["iter", "wsr", "surrogate", "cqp_status", "wallclock_ms"]
    assert solution.is_file()


def test_experiment_then_cdf(tmp_path, capsys):
    """Test an experiment run followed by a CDF over its results."""
    # Setup
    out_dir = tmp_path / "run"
    cdf = tmp_path / "cdf.csv"
    args = ["experiment", "--K", "1", "--N", "2", "--seeds", "0,1", "--algorithms", "inap"]
    assert main(args + ["--out-dir", str(out_dir), "--workers", "1"]) == 0

    # Verify
    assert json.loads(capsys.readouterr().out)["records"] == 2
    assert main(["cdf", "--results", str(out_dir / "results.csv"), "--out", str(cdf)]) == 0
    assert pd.read_csv(cdf)["percentile"].tolist() == [0.5, 1.0]


def test_invalid_input_exit_code(tmp_path):
    """Test that a bad configuration exits with code 2."""
    assert main(["generate", "--K", "1", "--N", "2", "--weights", "w3", "--out", str(tmp_path / "s.json")]) == 2
