# tests/test_cli.py
import argparse

import pytest

from occupation_lab.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, _count, _levels, _pair, build_parser, main
from occupation_lab.harness import read_manifest

COARSE = """
experiment = "coarse"
nu = 0.2
R = 4.5

[domain]
shape = "ball"
r_D = 1.0

[solver]
h = 0.5
"""


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("OCCUPATION_LAB_SEED", raising=False)


def test_count_accepts_scientific_notation():
    assert _count("1e5") == 100_000
    assert _count("250") == 250
    for bad in ("2.5", "0", "many"):
        with pytest.raises(argparse.ArgumentTypeError):
            _count(bad)


def test_levels_and_pairs():
    assert _levels("0,0.5, 1,") == [0.0, 0.5, 1.0]
    assert _pair("0,0,0:1,0,0") == ((0, 0, 0), (1, 0, 0))
    with pytest.raises(argparse.ArgumentTypeError):
        _pair("0,0,0")
    with pytest.raises(argparse.ArgumentTypeError):
        _pair("0,0,a:1,0,0")


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_capacity_command_writes_artifacts(tmp_path):
    out = tmp_path / "cap"
    assert main(["capacity", "--set", "{0}", "--accuracy", "1e-3", "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["capacity.csv", "capacity.json", "manifest.txt"]


def test_green_command(tmp_path):
    assert main(["green", "--pair", "0,0,0:1,0,0", "--accuracy", "1e-3", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "green.csv").is_file()


def test_theta_with_unknown_functional_fails(tmp_path):
    code = main(["theta", "--F", "F9", "--levels", "0,1", "--replicas", "10", "--out", str(tmp_path)])
    assert code == EXIT_FAILED


def test_missing_config_is_a_configuration_error(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "absent.toml")]) == EXIT_CONFIG


def test_invalid_config_is_a_configuration_error(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("experiment = \"bad\"\nnu = 0.2\nR = 3.0\n", encoding="utf-8")
    assert main(["solve", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_theta_runs_are_byte_identical(tmp_path):
    args = ["theta", "--F", "F2", "--levels", "0,0.5,1", "--replicas", "500", "--seed", "11", "--workers", "1"]
    first = main(args + ["--out", str(tmp_path / "a")])
    second = main(args + ["--out", str(tmp_path / "b")])
    assert first == second
    assert (tmp_path / "a" / "theta.csv").read_bytes() == (tmp_path / "b" / "theta.csv").read_bytes()


def test_manifest_records_the_command_line(tmp_path):
    out = tmp_path / "cap"
    argv = ["capacity", "--set", "B(0,1)", "--accuracy", "1e-3", "--out", str(out)]
    assert main(argv) == EXIT_OK
    recorded = read_manifest(out / "manifest.txt")
    assert recorded["argv"] == argv
    assert recorded["out_dir"] == str(out)
    assert set(recorded["files"]) == {"capacity.csv", "capacity.json"}


def test_rerun_reproduces_theta_artifacts(tmp_path):
    first = tmp_path / "first"
    main(["theta", "--F", "F2", "--levels", "0,1", "--replicas", "400", "--seed", "5", "--workers", "1",
          "--out", str(first)])
    again = tmp_path / "again"
    main(["rerun", "--manifest", str(first / "manifest.txt"), "--out", str(again)])
    assert (again / "theta.csv").read_bytes() == (first / "theta.csv").read_bytes()
    assert read_manifest(again / "manifest.txt")["seed"] == "5"


def test_rerun_reads_the_embedded_config(tmp_path):
    path = tmp_path / "coarse.toml"
    path.write_text(COARSE, encoding="utf-8")
    first = tmp_path / "first"
    main(["solve", "--config", str(path), "--out", str(first)])
    assert (first / "config.toml").read_text(encoding="utf-8") == COARSE
    path.unlink()
    again = tmp_path / "again"
    main(["rerun", "--manifest", str(first / "manifest.txt"), "--out", str(again)])
    assert (again / "solve.csv").read_bytes() == (first / "solve.csv").read_bytes()
    assert read_manifest(again / "manifest.txt")["config_path"] == str(first / "config.toml")


def test_rerun_without_manifest_is_a_configuration_error(tmp_path):
    assert main(["rerun", "--manifest", str(tmp_path / "manifest.txt"), "--out", str(tmp_path)]) == EXIT_CONFIG
