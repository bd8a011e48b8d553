import json
from pathlib import Path

import pytest

from plapminres.cli import ConfigError, config_from_dict, main


def strip_wall(csv_text: str) -> str:
    lines = []
    for line in csv_text.strip().splitlines():
        lines.append(",".join(line.split(",")[:-1]))
    return "\n".join(lines)


class TestConfigParsing:
    def test_unknown_field_named_in_error(self):
        with pytest.raises(ConfigError, match="p_tarjet"):
            config_from_dict({"p_target": 2.0, "p_tarjet": 3.0})

    def test_unknown_solver_field(self):
        with pytest.raises(ConfigError, match="dampen"):
            config_from_dict({"p_target": 2.0, "solver": {"dampen": True}})

    def test_invalid_value_reported(self):
        with pytest.raises(ConfigError, match="theta"):
            config_from_dict({"p_target": 2.0, "theta": 1.5})

    def test_solver_options_forwarded(self):
        cfg = config_from_dict({"p_target": 2.0,
                                "solver": {"max_newton": 7}})
        assert cfg.solver.max_newton == 7


class TestRunCommand:
    def test_run_from_config_file(self, tmp_path, capsys):
        config = {"p_target": 2.0, "initial_n": 2, "max_levels": 1}
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        code = main(["run", "--config", str(path)])
        assert code == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1  # one record row

    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"p_target": 2.0, "bogus": 1}))
        code = main(["run", "--config", str(path)])
        assert code == 2
        assert "bogus" in capsys.readouterr().err


class TestCase1Command:
    def test_single_level_single_row(self, tmp_path):
        code = main(["case1", "--p", "2.0", "--levels", "1",
                     "--out", str(tmp_path)])
        assert code == 0
        csv = (tmp_path / "case1_p2" / "records.csv").read_text()
        assert len(csv.strip().splitlines()) == 2  # header + one data row
        summary = json.loads((tmp_path / "rates_summary.json").read_text())
        assert "p=2" in summary

    def test_deterministic_csv_bytes(self, tmp_path):
        main(["case1", "--p", "1.5", "--levels", "2",
              "--out", str(tmp_path / "a")])
        main(["case1", "--p", "1.5", "--levels", "2",
              "--out", str(tmp_path / "b")])
        a = strip_wall((tmp_path / "a" / "case1_p1.5" / "records.csv").read_text())
        b = strip_wall((tmp_path / "b" / "case1_p1.5" / "records.csv").read_text())
        assert a == b


class TestCase2Command:
    def test_adaptive_snapshots_exist(self, tmp_path):
        code = main(["case2", "--strategy", "adaptive", "--steps", "3",
                     "--initial-n", "4", "--out", str(tmp_path)])
        assert code == 0
        study = tmp_path / "case2_adaptive"
        assert (study / "mesh_step_0.svg").exists()
        assert (study / "mesh_step_2.svg").exists()
        assert (study / "records.csv").exists()

    def test_uniform_reports_rates(self, tmp_path, capsys):
        code = main(["case2", "--strategy", "uniform", "--steps", "3",
                     "--out", str(tmp_path)])
        assert code == 0
        summary = json.loads((tmp_path / "rates_uniform.json").read_text())
        assert "slope_error" in summary["uniform"]
        assert "slope_eta" in summary["uniform"]


class TestRatesCommand:
    def test_fits_from_csv(self, tmp_path, capsys):
        main(["case1", "--p", "2.0", "--levels", "3", "--out", str(tmp_path)])
        csv_path = tmp_path / "case1_p2" / "records.csv"
        code = main(["rates", "--csv", str(csv_path), "--window", "3"])
        assert code == 0
        out = capsys.readouterr().out
        assert "slope(error)" in out and "slope(eta)" in out

    def test_rejects_foreign_csv(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b,c\n1,2,3\n")
        code = main(["rates", "--csv", str(bad), "--window", "2"])
        assert code == 2


class TestExportMesh:
    def test_svg(self, tmp_path):
        out = tmp_path / "mesh.svg"
        code = main(["export-mesh", "--n", "2", "--refine", "1",
                     "--format", "svg", "--out", str(out)])
        assert code == 0
        assert out.read_text().startswith("<svg")

    def test_vtk(self, tmp_path):
        out = tmp_path / "mesh.vtk"
        code = main(["export-mesh", "--n", "3", "--format", "vtk",
                     "--out", str(out)])
        assert code == 0
        assert "UNSTRUCTURED_GRID" in out.read_text()
