from __future__ import annotations

import json

import pytest

from adaptqsd import cli
from adaptqsd.errors import MassExtinctionError, NumericError


def _tiny(*extra):
    base = ["--set", "particles=40", "--set", "window=2.0", "--set", "burn_in=1.0",
            "--set", "nx=10", "--set", "ny=8"]
    return base + list(extra)


def _read(path):
    return path.read_bytes()


def test_fv_rerun_is_byte_identical(tmp_path):
    d1 = tmp_path / "a"
    d2 = tmp_path / "b"
    assert cli.main(["fv", "--out", str(d1)] + _tiny()) == 0
    assert cli.main(["fv", "--out", str(d2)] + _tiny()) == 0
    for name in ("alpha.csv", "lambda0.json", "manifest.json"):
        assert _read(d1 / name) == _read(d2 / name), name
    manifest = json.loads(_read(d1 / "manifest.json"))
    assert manifest["artifacts"] == ["alpha.csv", "lambda0.json"]
    assert "out" not in manifest["config"]
    assert "threads" not in manifest["config"]
    payload = json.loads(_read(d1 / "lambda0.json"))
    assert payload["lambda0"] > 0.0


def test_unknown_config_key_exits_2(tmp_path, capsys):
    rc = cli.main(["fv", "--out", str(tmp_path), "--set", "nope=1"])
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().err


def test_invalid_model_value_exits_2(tmp_path):
    rc = cli.main(["fv", "--out", str(tmp_path), "--set", "sigma=-1"])
    assert rc == 2


def test_validate_report(tmp_path, capsys):
    rc = cli.main(["validate", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "H1" in out and "H7" in out
    payload = json.loads(_read(tmp_path / "hypotheses.json"))
    assert payload["ok"] is True
    assert "H1" in payload["checks"]
    manifest = json.loads(_read(tmp_path / "manifest.json"))
    assert manifest["artifacts"] == ["hypotheses.json"]


def test_validate_violation_exits_3(tmp_path):
    rc = cli.main(["validate", "--out", str(tmp_path), "--set", "a=0"])
    assert rc == 3
    payload = json.loads(_read(tmp_path / "hypotheses.json"))
    assert payload["ok"] is False


def test_gated_command_exits_3_on_degenerate_model(tmp_path):
    rc = cli.main(["fv", "--out", str(tmp_path), "--set", "m_nu=0"] + _tiny())
    assert rc == 3
    assert not (tmp_path / "alpha.csv").exists()


def test_simulate_degenerate_model_warns_but_runs(tmp_path, capsys):
    rc = cli.main(["simulate", "--out", str(tmp_path), "--set", "m_nu=0",
                   "--set", "horizon=5.0"])
    assert rc == 0
    assert "runs anyway" in capsys.readouterr().err
    assert (tmp_path / "trajectory.csv").exists()
    payload = json.loads(_read(tmp_path / "exit.json"))
    assert payload["n_jumps"] == 0


def test_exit_code_mapping(tmp_path, monkeypatch):
    def numeric(cfg, params, sim, out):
        raise NumericError("synthetic")

    def extinct(cfg, params, sim, out):
        raise MassExtinctionError("synthetic", time=1.0)

    monkeypatch.setitem(cli.RUNNERS, "simulate", numeric)
    assert cli.main(["simulate", "--out", str(tmp_path)]) == 4
    monkeypatch.setitem(cli.RUNNERS, "simulate", extinct)
    assert cli.main(["simulate", "--out", str(tmp_path)]) == 5


def test_manifest_hash_semantics(tmp_path):
    cfg1 = cli.load_config(None, [], seed=7, threads=1, out="x")
    cfg2 = cli.load_config(None, [], seed=7, threads=4, out="y")
    cfg3 = cli.load_config(None, [], seed=8, threads=1, out="x")
    shas = []
    for i, cfg in enumerate((cfg1, cfg2, cfg3)):
        d = tmp_path / str(i)
        d.mkdir()
        cli.write_manifest(d, cfg, [])
        shas.append(json.loads(_read(d / "manifest.json"))["config_sha256"])
    assert shas[0] == shas[1]
    assert shas[0] != shas[2]


def test_config_file_loading(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"v": 0.35, "seed": 5}))
    d = tmp_path / "out"
    rc = cli.main(["validate", "--config", str(cfg_path), "--out", str(d)])
    assert rc == 0
    manifest = json.loads(_read(d / "manifest.json"))
    assert manifest["config"]["v"] == 0.35
    assert manifest["seed"] == 5

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["validate", "--config", str(bad), "--out", str(d)]) == 2
    notjson = tmp_path / "broken.json"
    notjson.write_text("{")
    assert cli.main(["validate", "--config", str(notjson), "--out", str(d)]) == 2


def test_lambda_subcommand(tmp_path):
    rc = cli.main(["lambda", "--out", str(tmp_path),
                   "--set", "replicates=300", "--set", "lambda_horizon=3.0"])
    assert rc == 0
    payload = json.loads(_read(tmp_path / "survival.json"))
    assert payload["lambda0"] > 0.0
    assert payload["flags"]  # replicate count below the recommended floor
    lines = (tmp_path / "survival_curve.csv").read_text().strip().splitlines()
    assert lines[0] == "t,survivors,in_fit"
    assert len(lines) == 25


def test_oracle_subcommand(tmp_path):
    rc = cli.main(["oracle", "--out", str(tmp_path),
                   "--set", "oracle_nx=24", "--set", "oracle_ny=20"])
    assert rc == 0
    payload = json.loads(_read(tmp_path / "oracle.json"))
    assert 0.5 < payload["lambda0"] < 1.1
    assert payload["residual_alpha"] < 1e-8
    assert payload["residual_eta"] < 1e-8
    assert (tmp_path / "oracle_alpha.csv").exists()
    lines = (tmp_path / "oracle_eta.csv").read_text().strip().splitlines()
    assert len(lines) == 24 * 20 + 1


def test_eta_subcommand(tmp_path):
    rc = cli.main(["eta", "--out", str(tmp_path)] + _tiny(
        "--set", "eta_replicates=60", "--set", "eta_nodes_x=4",
        "--set", "eta_nodes_y=3", "--set", "eta_t_eval=0.5"))
    assert rc == 0
    lines = (tmp_path / "eta.csv").read_text().strip().splitlines()
    assert lines[0] == "x,y,eta,stderr,survivors"
    assert len(lines) == 4 * 3 + 1
    for name in ("alpha.csv", "lambda0.json", "beta.csv", "manifest.json"):
        assert (tmp_path / name).exists()


def test_qprocess_subcommand(tmp_path):
    rc = cli.main(["qprocess", "--out", str(tmp_path)] + _tiny(
        "--set", "eta_replicates=60", "--set", "eta_nodes_x=4",
        "--set", "eta_nodes_y=3", "--set", "eta_t_eval=0.5",
        "--set", "walkers=16", "--set", "q_horizon=0.5", "--set", "q_paths=1"))
    assert rc == 0
    payload = json.loads(_read(tmp_path / "qprocess.json"))
    stats = payload["attempt_stats"]
    assert stats["max_attempt_rounds"] >= 1
    assert "ceiling_violations" in stats
    assert (tmp_path / "q_marginal.csv").exists()
    assert (tmp_path / "qpath_0.csv").exists()


_DIAG = ["--set", "particles=20", "--set", "window=1.5", "--set", "burn_in=1.0",
         "--set", "nx=8", "--set", "ny=8", "--set", "conv_replicates=2",
         "--set", "conv_particles=40", "--set", "t_max=1.5",
         "--set", "slice_dt=0.5", "--set", "balance_particles=20",
         "--set", "balance_burn=1.0", "--set", "balance_collect=2.0",
         "--set", "L_list=[4.0]"]


def test_diagnose_thread_count_does_not_change_artifacts(tmp_path):
    d1 = tmp_path / "serial"
    d2 = tmp_path / "pooled"
    assert cli.main(["diagnose", "--out", str(d1), "--threads", "1"] + _DIAG) == 0
    assert cli.main(["diagnose", "--out", str(d2), "--threads", "2"] + _DIAG) == 0
    for name in ("convergence.csv", "balance.json", "truncation.csv",
                 "diagnose.json", "manifest.json"):
        assert _read(d1 / name) == _read(d2 / name), name
    payload = json.loads(_read(d1 / "diagnose.json"))
    assert payload["lambda0"] > 0.0
    assert "balance_sigmas" in payload
