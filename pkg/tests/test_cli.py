import json
import subprocess
import sys

import numpy as np
import pytest

from randpoincare import cli
from randpoincare import pipeline as pl
from randpoincare import poincare as pc

SMALL = ["--cells", "100", "--samples-per-cell", "300", "--seed", "3"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def analyzed(tmp_path_factory):
    out = tmp_path_factory.mktemp("analyze")
    code = cli.main(["analyze", "--model", "reference", "--sigma2", "0.02", "0.015", "0.01",
                     "--out", str(out)] + SMALL)
    return code, out


class TestAnalyze:
    def test_exit_and_artifacts(self, analyzed):
        code, out = analyzed
        assert code == 0
        names = {p.name for p in out.iterdir()}
        for s2 in ("0.02", "0.015", "0.01"):
            for stem in ("kernel", "structure", "spectrum", "report"):
                assert any(n.startswith(f"{stem}_s2_{s2}") for n in names), (stem, s2)
        assert {"config.json", "summary.json", "orbits.csv"} <= names

    def test_summary(self, analyzed):
        _, out = analyzed
        summary = json.loads((out / "summary.json").read_text())
        assert summary["hard_failures"] == []
        assert summary["exponent"]["analytic"] == pytest.approx(0.039583333333333345)
        assert summary["exponent"]["H"] == pytest.approx(0.0396, rel=0.15)

    def test_kernel_file_loads(self, analyzed):
        _, out = analyzed
        K = pc.load_kernel(out / "kernel_s2_0.01.json")
        assert K.size == 100
        assert K.sigma == pytest.approx(0.1)
        assert K.metadata["seed"] == 3

    def test_byte_identical_rerun(self, analyzed, tmp_path):
        _, out = analyzed
        assert cli.main(["analyze", "--model", "reference", "--sigma2", "0.02", "0.015", "0.01",
                         "--out", str(tmp_path)] + SMALL) == 0
        csvs = sorted(p.name for p in out.glob("*.csv"))
        assert csvs
        for name in csvs:
            assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name

    def test_single_sigma(self, tmp_path, capsys):
        code, out, _ = run(["analyze", "--sigma2", "0.01", "--out", str(tmp_path),
                            "--checks", "exact"] + SMALL, capsys)
        assert code == 0
        assert "analyze: PASS" in out
        assert (tmp_path / "spectrum_s2_0.01.csv").is_file()


class TestErrors:
    def test_missing_model(self, tmp_path, capsys):
        code, _, err = run(["analyze", "--model", str(tmp_path / "none.json"),
                            "--out", str(tmp_path)], capsys)
        assert code == 2
        assert json.loads(err)["stage"] == "config"

    def test_missing_config(self, tmp_path, capsys):
        code, _, err = run(["kernel", "--config", str(tmp_path / "none.json")], capsys)
        assert code == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"cellz": 10}))
        code, _, err = run(["kernel", "--config", str(cfg)], capsys)
        assert code == 2

    def test_bad_range(self, tmp_path, capsys):
        code, _, _ = run(["kernel", "--samples-per-cell", "10", "--out", str(tmp_path)], capsys)
        assert code == 2

    def test_stage_error(self, analyzed, tmp_path, capsys):
        _, out = analyzed
        code, _, err = run(["qsd", "--kernel", str(out / "kernel_s2_0.01.json"),
                            "--set-a", "0:100", "--out", str(tmp_path)], capsys)
        assert code == 3
        assert json.loads(err)["stage"] == "qsd"

    def test_subprocess_exit_code(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "randpoincare.cli", "verify",
                            "--kernel", str(tmp_path / "nope.json")],
                           capture_output=True, text=True)
        assert r.returncode == 2
        assert json.loads(r.stderr)["stage"] == "config"


class TestSubcommands:
    def test_verify_exact(self, analyzed, tmp_path, capsys):
        _, out = analyzed
        code, text, _ = run(["verify", "--kernel", str(out / "kernel_s2_0.01.json"),
                             "--suite", "exact", "--out", str(tmp_path)], capsys)
        assert code == 0
        assert "verify: PASS" in text
        report = json.loads((tmp_path / "report_exact.json").read_text())
        assert all(v["pass"] for v in report["exact"].values())

    def test_verify_with_structure(self, analyzed, tmp_path, capsys):
        _, out = analyzed
        code, text, _ = run(["verify", "--kernel", str(out / "kernel_s2_0.01.json"),
                             "--structure", str(out / "structure_s2_0.01.json"),
                             "--suite", "theorems", "--out", str(tmp_path)], capsys)
        assert code in (0, 1)
        assert text.strip().splitlines()[-1] in ("verify: PASS", "verify: FAIL")

    def test_spectrum(self, analyzed, tmp_path, capsys):
        _, out = analyzed
        code, _, _ = run(["spectrum", "--kernel", str(out / "kernel_s2_0.01.json"),
                          "--count", "4", "--out", str(tmp_path)], capsys)
        assert code == 0
        rows = (tmp_path / "spectrum.csv").read_text().splitlines()
        assert len(rows) == 5
        assert float(rows[1].split(",")[1]) == pytest.approx(1.0, abs=1e-10)

    def test_committor(self, analyzed, tmp_path, capsys):
        _, out = analyzed
        code, _, _ = run(["committor", "--kernel", str(out / "kernel_s2_0.01.json"),
                          "--set-a", "x=0.9..1.1", "--set-b", "x=2.1..2.3",
                          "--out", str(tmp_path)], capsys)
        assert code == 0
        rows = (tmp_path / "committor.csv").read_text().splitlines()
        h = np.array([float(r.split(",")[-1]) for r in rows[1:]])
        assert len(h) == 100 and h.min() >= 0 and h.max() <= 1

    def test_qsd(self, analyzed, tmp_path, capsys):
        _, out = analyzed
        code, text, _ = run(["qsd", "--kernel", str(out / "kernel_s2_0.01.json"),
                             "--set-a", "x=0.8..1.2", "--out", str(tmp_path)], capsys)
        assert code == 0
        assert 0.9 < json.loads(text)["lambda0"] < 1

    def test_hierarchy(self, capsys):
        H = json.dumps([[None, 3, 5], [1, None, 4], [2, 6, None]])
        code, text, _ = run(["hierarchy", "--H", H], capsys)
        assert code == 0
        res = json.loads(text)
        assert res["order"] == [0, 2, 1] and res["theta"] == 1

    def test_hierarchy_from_model(self, capsys):
        code, text, _ = run(["hierarchy", "--model", "reference"], capsys)
        assert code == 0
        assert json.loads(text)["order"] == [1, 0]

    def test_orbits(self, tmp_path, capsys):
        code, text, _ = run(["orbits", "--out", str(tmp_path)], capsys)
        assert code == 0
        orbits = json.loads(text)["orbits"]
        assert [round(o["anchor"][0], 6) for o in orbits] == [1.0, 1.5, 2.2]
        assert [o["stable"] for o in orbits] == [True, False, True]

    def test_config_file_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"cells": 20, "samples_per_cell": 100, "sigma2": [0.02],
                                   "out": str(tmp_path / "o")}))
        code, text, _ = run(["kernel", "--config", str(cfg), "--cells", "25"], capsys)
        assert code == 0
        K = pc.load_kernel(tmp_path / "o" / "kernel_s2_0.02.json")
        assert K.size == 25
        assert K.sample_counts.max() == 100


class TestModelFiles:
    def test_radial_file(self, tmp_path, capsys):
        spec = {"name": "two-cycle", "dimension": 2, "catalog": "radial",
                "parameters": {"roots": [1.0, 1.5, 2.2], "omega": 1.0, "theta_noise": 0.1},
                "sigma": 0.1, "sections": {"primary_theta": 0.0, "secondary_theta": 2.0},
                "domain": {"r_min": 0.5, "r_max": 3.0}, "confinement": "recurrent"}
        path = tmp_path / "m.json"
        path.write_text(json.dumps(spec))
        m = pl.load_model(str(path), sigma=0.1)
        assert m.secondary.offset == pytest.approx(2.0)
        code, text, _ = run(["orbits", "--model", str(path), "--out", str(tmp_path)], capsys)
        assert code == 0

    def test_missing_secondary(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"catalog": "radial", "parameters": {"roots": [1.0]},
                                    "sections": {"primary_theta": 0.0}}))
        with pytest.raises(pl.ConfigError):
            pl.load_model(str(path))

    def test_parse_cells(self):
        K = pc.DiscretizedKernel(pc.Grid(0.0, 1.0, 10), np.eye(10), None, None, 0.0)
        np.testing.assert_array_equal(cli.parse_cells("2:5", K), [2, 3, 4])
        np.testing.assert_array_equal(cli.parse_cells("1, 7", K), [1, 7])
        np.testing.assert_array_equal(cli.parse_cells("x=0.3..0.5", K), [3, 4])
        with pytest.raises(pl.ConfigError):
            cli.parse_cells("x=5..6", K)
        with pytest.raises(pl.ConfigError):
            cli.parse_cells("a:b", K)
