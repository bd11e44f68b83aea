"""
End-to-end runs of the leafheat command line.
"""

import json
import math

import pytest
import yaml

from main import run
from runner import ExperimentRunner
from table_writer import TableWriter

GOLDEN_SQUARE = (3.0 + math.sqrt(5.0)) / 2.0

SMALL_CAT = {
    "system": {"kind": "toral-automorphism"},
    "rectangle": {"base": [0.3, 0.4], "n_leaves": 4, "stable_radius": 0.05, "eps": 0.25,
                  "h": 0.0078125},
    "srb": {"n": 20, "n_samples": 20000, "n_iter": 100, "holder_pairs": 200},
    "walk": {"n_paths": 1000, "times": [0.0005]},
    "zero_energy": {"leaves": [1, 3]},
}


@pytest.fixture
def config_file(tmp_path):
    def write(data=None, name="config.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(SMALL_CAT if data is None else data))
        return str(path)

    return write


def error_payload(stderr):
    lines = [line for line in stderr.splitlines() if line.startswith('{"errors"')]
    assert lines, stderr
    return json.loads(lines[-1])


def column(table, name):
    return [row[table["columns"].index(name)] for row in table["rows"]]


def test_spectrum_writes_csv_with_metadata(tmp_path, config_file):
    out = tmp_path / "spectrum.csv"
    code = run(["spectrum", "--config", config_file(), "--cache-dir", str(tmp_path / "cache"),
                "--output", str(out)])
    assert code == 0
    table = TableWriter.read(str(out))
    meta = table["metadata"]
    assert meta["library"] == "leafheat"
    assert meta["experiment"] == "spectrum"
    assert meta["grid"] == {"n_leaves": 4, "eps": 0.25, "h": 0.0078125, "nodes": 4 * 65}
    assert meta["diagnostics"]["zero_modes"] == 4
    assert len(meta["config_hash"]) == 16
    assert table["columns"] == ["leaf", "k", "theta"]
    assert len(table["rows"]) == 4 * 65
    assert sorted(float(v) for v in column(table, "theta"))[:4] == [0.0] * 4


def test_rerun_is_byte_identical(tmp_path, config_file):
    cache = str(tmp_path / "cache")
    first, second, uncached = (tmp_path / f"{n}.csv" for n in ("a", "b", "c"))
    assert run(["heat", "--config", config_file(), "--cache-dir", cache,
                "--output", str(first)]) == 0
    assert list((tmp_path / "cache").glob("srb-*.json"))
    assert run(["heat", "--config", config_file(), "--cache-dir", cache,
                "--output", str(second)]) == 0
    assert run(["heat", "--config", config_file(), "--no-cache", "--output", str(uncached)]) == 0
    assert first.read_bytes() == second.read_bytes()
    assert (TableWriter.data_section(first.read_text())
            == TableWriter.data_section(uncached.read_text()))


def test_table_goes_to_stdout_without_output(config_file, capsys):
    assert run(["zero-energy", "--config", config_file(), "--no-cache"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# {")
    meta = json.loads(out.split("\n", 1)[0][2:])
    assert meta["diagnostics"]["energy"] == 0.0
    assert meta["diagnostics"]["leaves"] == [1, 3]


def test_cat_quasi_invariance_ratio(tmp_path, config_file):
    cache = str(tmp_path / "cache")
    for n in (1, 2):
        out = tmp_path / f"qi{n}.csv"
        assert run(["quasi-invariance", "--config", config_file(), "--cache-dir", cache,
                    "--n", str(n), "--output", str(out)]) == 0
        table = TableWriter.read(str(out))
        ratio = float(column(table, "ratio")[0])
        assert ratio == pytest.approx(GOLDEN_SQUARE ** (2 * n), rel=1e-6)
        assert column(table, "aligned") == ["true"]


def test_seed_flag_overrides_config(tmp_path, config_file):
    out = tmp_path / "srb.csv"
    assert run(["srb-estimate", "--config", config_file(), "--no-cache", "--seed", "5",
                "--output", str(out)]) == 0
    table = TableWriter.read(str(out))
    assert table["metadata"]["seed"] == 5
    assert table["metadata"]["srb_seed"] == 5
    weights = [float(w) for w in column(table, "weight")]
    assert sum(weights) == pytest.approx(1.0)


def test_walk_reports_distance_to_the_heat_kernel(tmp_path, config_file, capsys):
    out = tmp_path / "walk.csv"
    assert run(["walk", "--config", config_file(), "--no-cache", "--output", str(out)]) == 0
    table = TableWriter.read(str(out))
    assert table["columns"] == ["t", "total_variation", "tv_band", "n_paths", "leaf_confined"]
    tv, band = float(column(table, "total_variation")[0]), float(column(table, "tv_band")[0])
    assert 0.0 < tv <= band
    assert column(table, "leaf_confined") == ["true"]

    few = {**SMALL_CAT, "walk": {"n_paths": 999, "times": [0.0005]}}
    assert run(["walk", "--config", config_file(few), "--no-cache"]) == 2
    payload = error_payload(capsys.readouterr().err)
    assert payload["errors"][0]["param"] == "walk.n_paths"


def test_unknown_config_key_exits_with_2(config_file, capsys):
    bad = {**SMALL_CAT, "rectangle": {"leaves": 4}}
    assert run(["spectrum", "--config", config_file(bad), "--no-cache"]) == 2
    payload = error_payload(capsys.readouterr().err)
    assert any(e["param"] == "rectangle.leaves" for e in payload["errors"])


def test_missing_config_file_exits_with_2(tmp_path, capsys):
    assert run(["spectrum", "--config", str(tmp_path / "absent.yaml")]) == 2
    payload = error_payload(capsys.readouterr().err)
    assert payload["errors"][0]["type"] == "ConfigError"


def test_unknown_subcommand_exits_with_2():
    assert run(["teleport"]) == 2


def test_non_conformal_quasi_invariance_exits_with_3(config_file, capsys):
    da = {"system": {"kind": "da-map"}, "rectangle": {"base": [0.55, 0.35], "n_leaves": 4}}
    assert run(["quasi-invariance", "--config", config_file(da), "--no-cache"]) == 3
    payload = error_payload(capsys.readouterr().err)
    assert payload["errors"][0]["type"] == "NonConformalError"
    assert payload["errors"][0]["code"] == "non_conformal"


def test_grid_too_coarse_for_the_traced_leaf_exits_with_2(config_file, capsys):
    coarse = {**SMALL_CAT, "rectangle": {"base": [0.3, 0.4], "n_leaves": 4, "h": 0.05}}
    assert run(["spectrum", "--config", config_file(coarse), "--no-cache"]) == 2
    payload = error_payload(capsys.readouterr().err)
    assert payload["errors"][0]["code"] == "invalid_config"


def test_failure_inside_an_experiment_exits_with_3(config_file, capsys, monkeypatch):
    def broken(self, name):
        raise ValueError("uniformization needs the generator of the form")

    monkeypatch.setattr(ExperimentRunner, "run", broken)
    assert run(["heat", "--config", config_file(), "--no-cache"]) == 3
    payload = error_payload(capsys.readouterr().err)
    assert payload["errors"][0]["code"] == "numerical_failure"
