# tests/test_cli.py
import json

import numpy as np
import pytest

from src.cli.run_config import load_dataset, parse_config, write_dataset
from src.main import EXIT_OK, EXIT_USER, main
from src.stiv.exceptions import ConfigError, DataError
from src.utils.reports import load_report

NAMES = {"regressors": ["x0", "w"], "instruments": ["const", "z1", "z2", "w"], "zbar": []}
ROLE_FLAGS = ["--outcome", "y", "--regressors", "x0,w", "--instruments", "const,z1,z2,w",
              "--constant", "const", "--exogenous", "w"]


@pytest.fixture
def csv_path(iv_dataset, tmp_path):
    return str(write_dataset(iv_dataset, NAMES, tmp_path / "iv.csv"))


def _flags(csv_path, **extra):
    flags = {"data": csv_path, "outcome": "y", "regressors": ["x0", "w"], "instruments": ["const", "z1", "z2", "w"],
             "constant": "const", "exogenous": ["w"]}
    flags.update(extra)
    return flags


class TestRunConfig:
    """Test suite for configuration parsing."""

    def test_defaults(self, csv_path):
        """Test the documented defaults."""
        cfg = parse_config(None, {"command": "fit", **_flags(csv_path)})
        assert cfg.c == 0.1
        assert cfg.scenario == 4
        assert cfg.alpha == 0.05
        assert cfg.estimator == "stiv"
        assert cfg.add_constant

    def test_flags_override_json(self, csv_path, tmp_path):
        """Test that flags win over the JSON document."""
        doc = tmp_path / "run.json"
        doc.write_text(json.dumps({"command": "fit", "c": 0.3, **_flags(csv_path)}))
        assert parse_config(str(doc), {"c": None}).c == 0.3
        assert parse_config(str(doc), {"c": 0.2}).c == 0.2

    def test_undeclared_shared_column(self, csv_path):
        """Test that a regressor reused as an instrument must be declared exogenous."""
        with pytest.raises(ConfigError):
            parse_config(None, {"command": "fit", **_flags(csv_path, exogenous=None)})

    def test_unknown_key_points_at_json(self, csv_path, tmp_path):
        """Test that validation errors carry the JSON path."""
        doc = tmp_path / "run.json"
        doc.write_text(json.dumps({"command": "fit", "colour": "red", **_flags(csv_path)}))
        with pytest.raises(ConfigError) as info:
            parse_config(str(doc))
        assert "colour" in info.value.provenance

    def test_bad_flag_value_points_at_flag(self, csv_path):
        """Test flag provenance."""
        with pytest.raises(ConfigError) as info:
            parse_config(None, {"command": "fit", **_flags(csv_path, c=1.5)})
        assert info.value.provenance == "--c"

    def test_simplified_c4_reaches_scenario(self, csv_path):
        """Test that the fourth-moment bound flows into the scenario and is range checked."""
        cfg = parse_config(None, {"command": "fit", **_flags(csv_path, scenario=5, simplified_c4=4.0)})
        assert cfg.scenario_spec().simplified_c4 == 4.0
        with pytest.raises(ConfigError) as info:
            parse_config(None, {"command": "fit", **_flags(csv_path, simplified_c4=0.5)})
        assert info.value.provenance == "--simplified-c4"

    def test_missing_file(self, tmp_path):
        """Test that a missing config document is a configuration error."""
        with pytest.raises(ConfigError):
            parse_config(str(tmp_path / "absent.json"))

    @pytest.mark.parametrize("command,extra", [("nv", {}), ("twostage", {})])
    def test_command_requirements(self, csv_path, command, extra):
        """Test that nv needs zbar and twostage needs k_end."""
        with pytest.raises(ConfigError):
            parse_config(None, {"command": command, **_flags(csv_path, **extra)})

    def test_simulate_skips_roles(self):
        """Test that simulate needs no data."""
        cfg = parse_config(None, {"command": "simulate", "profile": "table3", "reps": 5})
        assert cfg.reps == 5


class TestCsv:
    """Test suite for CSV ingestion."""

    def test_round_trip_is_exact(self, iv_dataset, csv_path):
        """Test that written data reads back bit for bit."""
        cfg = parse_config(None, {"command": "fit", **_flags(csv_path)})
        ds, names = load_dataset(cfg)
        assert np.array_equal(ds.y, iv_dataset.y)
        assert np.array_equal(ds.x, iv_dataset.x)
        assert np.array_equal(ds.z, iv_dataset.z)
        assert ds.const_instr_idx == 0
        assert names["instruments"] == NAMES["instruments"]

    def test_constant_appended(self, csv_path):
        """Test that a missing ones column is added at the end."""
        cfg = parse_config(None, {"command": "fit", **_flags(csv_path, instruments=["z1", "z2", "w"],
                                                               constant=None)})
        ds, names = load_dataset(cfg)
        assert names["instruments"][-1] == "const"
        assert ds.const_instr_idx == 3

    def test_non_numeric_cell(self, tmp_path):
        """Test that bad cells name their column and row."""
        path = tmp_path / "bad.csv"
        path.write_text("y,x,c\n1.0,2.0,1\n2.0,abc,1\n")
        cfg = parse_config(None, {"command": "fit", "data": str(path), "outcome": "y", "regressors": ["x"],
                                  "instruments": ["c"]})
        with pytest.raises(DataError) as info:
            load_dataset(cfg)
        assert "'x'" in str(info.value) and "row 2" in str(info.value)


class TestMain:
    """Test suite for the command line entry point."""

    def test_fit_writes_reports(self, csv_path, tmp_path):
        """Test a successful fit run and its report files."""
        out = tmp_path / "out"
        code = main(["fit", "--data", csv_path, *ROLE_FLAGS, "--output-dir", str(out), "--max-workers", "1"])
        assert code == EXIT_OK
        doc = load_report(out / "fit.json")
        assert doc["echo"]["command"] == "fit"
        assert doc["echo"]["config"]["r_used"] == doc["result"]["r"]
        assert (out / "fit.txt").read_text().startswith("# command: fit")

    def test_ci_with_plugin(self, csv_path, tmp_path):
        """Test the interval command with the plug-in table."""
        out = tmp_path / "out"
        code = main(["ci", "--data", csv_path, *ROLE_FLAGS, "--s", "1", "--plugin", "--output-dir", str(out)])
        assert code == EXIT_OK
        doc = load_report(out / "ci.json")
        assert doc["result"]["plugin"]["approximate"] is True

    def test_missing_data_file(self, tmp_path):
        """Test that a missing CSV exits with the user-error status."""
        code = main(["fit", "--data", str(tmp_path / "none.csv"), *ROLE_FLAGS, "--output-dir", str(tmp_path)])
        assert code == EXIT_USER

    def test_unknown_command(self):
        """Test that usage errors exit with the user-error status."""
        assert main(["frobnicate"]) == EXIT_USER

    def test_unknown_profile(self, tmp_path):
        """Test that simulate rejects unknown profiles."""
        assert main(["simulate", "--profile", "table9", "--output-dir", str(tmp_path)]) == EXIT_USER
