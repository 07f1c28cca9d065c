import json

import numpy as np
import pytest
import yaml

import main


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(workdir, *args):
    argv = list(args) + ["--config", str(workdir / "missing.yaml"), "--out", str(workdir / "out")]
    return main.main(argv)


def read_manifest(workdir):
    with open(workdir / "out" / "manifest.yaml") as handle:
        return yaml.safe_load(handle)


def test_fit_exponent():
    sizes = np.array([8.0, 16.0, 32.0, 64.0])
    assert main.fit_exponent(sizes, 3e-4 * sizes ** 2) == pytest.approx(2.0)
    assert main.fit_exponent([63], [1.0]) is None


def test_default_config_used_when_missing(workdir, capsys):
    config = main._load_config(str(workdir / "missing.yaml"))
    assert config["truncation"]["rel_tol"] == 1e-12
    assert "not found" in capsys.readouterr().out


def test_config_file_merges_sections(workdir):
    path = workdir / "config.yaml"
    path.write_text(yaml.safe_dump({"truncation": {"leaf_size": 16}, "backend": "dense"}))
    config = main._load_config(str(path))
    assert config["truncation"]["leaf_size"] == 16
    assert config["truncation"]["rel_tol"] == 1e-12
    assert config["backend"] == "dense"


def test_cli_overrides_config():
    args = main.build_parser().parse_args(["solve", "--m", "8", "--n", "7", "--tol", "1e-10",
                                           "--leaf-size", "4", "--backend", "dense"])
    run_config = main.build_run_config(args, main._get_default_config())
    assert run_config.problem.m == 8 and run_config.problem.n == 7
    assert run_config.truncation.rel_tol == 1e-10
    assert run_config.truncation.leaf_size == 4
    assert run_config.residual_tolerance() == 1e-10


def test_solve_command(workdir):
    status = run(workdir, "solve", "--problem", "poisson", "--n", "15", "--m", "16", "--backend", "dense")
    assert status == 0
    out = workdir / "out"
    timings = (out / "timings.dat").read_text().splitlines()
    assert timings[0] == "# size seconds residual"
    assert timings[1].split()[0] == "15"
    assert np.loadtxt(out / "solution_n15_m16.dat").shape == (15, 16)
    manifest = read_manifest(workdir)
    assert manifest["command"] == "solve"
    assert manifest["checks"]["failed"] == 0
    assert manifest["results"]["solve"][0]["residual"] <= 1e-10


def test_timings_are_appended(workdir):
    assert run(workdir, "solve", "--n", "7", "--m", "4", "--backend", "dense") == 0
    assert run(workdir, "solve", "--n", "7", "--m", "4", "--backend", "dense") == 0
    lines = (workdir / "out" / "timings.dat").read_text().splitlines()
    assert len(lines) == 3


def test_decay_command(workdir):
    status = run(workdir, "decay", "--problem", "poisson", "--m", "16")
    assert status == 0
    lines = (workdir / "out" / "decay.dat").read_text().splitlines()
    assert lines[0] == "# l sigma_l bound_rational bound_zolotarev bound_prior"
    assert len(lines) == 26
    manifest = read_manifest(workdir)
    assert manifest["results"]["decay"]["mode"] == "symmetric-palindromic"
    assert manifest["results"]["decay"]["estimator"] == "greedy"
    assert (workdir / "out" / "cr_telemetry.dat").exists()


def test_decay_dat_keeps_columns_for_random_qbd(workdir):
    assert run(workdir, "decay", "--problem", "random-qbd", "--m", "24") == 0
    data = np.loadtxt(workdir / "out" / "decay.dat")
    assert data.shape == (25, 5)
    assert np.array_equal(data[:, 0], np.arange(1, 26))
    assert np.all(data[:, 4] > 0)


def test_decay_csv_output(workdir):
    assert run(workdir, "decay", "--problem", "poisson", "--m", "12", "--emit", "csv") == 0
    header = (workdir / "out" / "decay.csv").read_text().splitlines()[0]
    assert header == "l,sigma_l,bound_rational,bound_zolotarev,bound_prior"


def test_sylvester_command_with_reference(workdir):
    status = run(workdir, "sylvester", "--sizes", "15", "--reference", "--repeats", "1")
    assert status == 0
    record = read_manifest(workdir)["results"]["sylvester"][0]
    assert record["residual"] <= 1e-8
    assert record["relative_difference"] <= 1e-8
    assert (workdir / "out" / "reference_timings.dat").exists()


def test_bench_single_size_has_no_exponent(workdir, capsys):
    status = run(workdir, "bench", "--sizes", "15", "--repeats", "1", "--backend", "dense")
    assert status == 0
    bench = read_manifest(workdir)["results"]["bench"]["dense"]
    assert bench["exponent"] is None
    assert bench["theoretical_target"] == 3.0
    assert "unavailable" in capsys.readouterr().out


def test_invalid_configuration_reports_json(workdir, capsys):
    status = run(workdir, "solve", "--problem", "poisson", "--m", "1")
    assert status == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "InvalidConfiguration"


def test_failure_reports_json(workdir, capsys):
    status = run(workdir, "decay", "--problem", "convection-diffusion", "--m", "15")
    assert status == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ValueError"


def test_solver_error_reports_reason(workdir, capsys):
    status = run(workdir, "solve", "--n", "7", "--m", "4", "--backend", "dense", "--tol", "1e-10")
    assert status == 0
    status = main.main(["solve", "--n", "7", "--m", "4", "--backend", "hodlr", "--tol", "1e-30",
                        "--config", str(workdir / "missing.yaml"), "--out", str(workdir / "out")])
    assert status == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ResidualTooLarge"
    assert record["residual"] > 0


@pytest.mark.slow
def test_bench_exponents_follow_complexity(workdir):
    status = run(workdir, "bench", "--sizes", "63", "127", "255", "511", "--repeats", "3", "--reference")
    assert status == 0
    bench = read_manifest(workdir)["results"]["bench"]
    assert 1.7 <= bench["hodlr"]["exponent"] <= 2.6
    assert bench["dense"]["exponent"] >= bench["hodlr"]["exponent"] + 0.5
    assert bench["hodlr"]["theoretical_target"] == 2.0
