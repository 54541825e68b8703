"""Command-line entry point: reproducible experiment runs from a flat JSON config.

Subcommands bind the estimator stack into artifact-producing runs. Every run
writes its outputs plus a manifest.json recording the semantic config, its
sha256, the seed, and library versions; reruns with the same (config, seed)
reproduce every artifact byte for byte. Exit codes: 0 ok, 2 config error,
3 hypothesis violation, 4 numeric failure, 5 mass extinction.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import (AdaptQsdError, ConfigError, DomainError, HypothesisError,
                     MassExtinctionError, NumericError, UnsupportedModelError)
from .measure import EmpiricalMeasure
from .model import ModelParams, default_params, reference_set, validate_hypotheses
from .oracle import build_generator, leading_triple
from .pathsim import SimConfig, simulate_path, simulate_q_path
from .qsd import (balance_residual, beta_from, conditioned_marginal,
                  convergence_curve, default_hist_grid, estimate_eta,
                  estimate_lambda0_survival, fleming_viot, relaxed_start,
                  truncation_family)
from .rng import StreamKey, stream

EXIT_CODES = {
    ConfigError: 2,
    DomainError: 2,
    UnsupportedModelError: 2,
    HypothesisError: 3,
    NumericError: 4,
    MassExtinctionError: 5,
}

# symbol-to-key map: model block, numerics block, experiment block
DEFAULT_CONFIG: dict = {
    # model
    "dim": 1,
    "v": 0.2,
    "sigma": 1.0,
    "gamma_n": 0.1,
    "r0": 2.0,
    "a": 0.5,
    "mu": 1.0,
    "fixation_family": "deleterious_ok",
    "g_max": 1.0,
    "s": 2.0,
    "mutation_family": "gaussian",
    "m_nu": 1.0,
    "tau": 0.5,
    # numerics
    "L": 4.0,
    "truncation_y_low": 0.001,
    "dt_max": 0.01,
    "y_ext": 0.001,
    "x_max": None,
    "horizon": 50.0,
    "substep_alpha": 0.5,
    "prop_target": 0.3,
    "slack": 1.5,
    "qprocess_delta": 0.05,
    "record_every": 1,
    # experiment
    "seed": 0,
    "threads": 1,
    "particles": 2000,
    "window": 50.0,
    "burn_in": "auto",
    "nx": 80,
    "ny": 60,
    "replicates": 5000,
    "lambda_horizon": 8.0,
    "eta_t_eval": 2.0,
    "eta_replicates": 3000,
    "eta_nodes_x": 30,
    "eta_nodes_y": 20,
    "walkers": 500,
    "q_horizon": 20.0,
    "q_paths": 3,
    "oracle_nx": 80,
    "oracle_ny": 60,
    "L_list": [2.5, 3.0, 4.0, 5.0],
    "conv_replicates": 8,
    "conv_particles": 500,
    "t_max": 12.0,
    "slice_dt": 1.0,
    "balance_particles": 400,
    "balance_burn": 30.0,
    "balance_collect": 100.0,
    "out": "out",
}

# keys that do not influence results; excluded from the manifest hash
NON_SEMANTIC_KEYS = ("out", "threads")


def load_config(path: str | None, overrides: list[str], seed: int | None,
                threads: int | None, out: str | None) -> dict:
    """Merge defaults <- config file <- --set overrides <- dedicated flags."""
    cfg = dict(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _merge(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, raw = item.partition("=")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        _merge(cfg, {k: val})
    if seed is not None:
        cfg["seed"] = seed
    if threads is not None:
        cfg["threads"] = threads
    if out is not None:
        cfg["out"] = out
    return cfg


def _merge(cfg: dict, updates: dict) -> None:
    for k, v in updates.items():
        if k not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = v


def build_params(cfg: dict) -> ModelParams:
    try:
        return default_params(
            dim=int(cfg["dim"]), v=float(cfg["v"]), sigma=float(cfg["sigma"]),
            gamma_n=float(cfg["gamma_n"]), r0=float(cfg["r0"]), a=float(cfg["a"]),
            mu=float(cfg["mu"]), fixation_family=str(cfg["fixation_family"]),
            g_max=float(cfg["g_max"]), s=float(cfg["s"]),
            mutation_family=str(cfg["mutation_family"]),
            m_nu=float(cfg["m_nu"]), tau=float(cfg["tau"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model field: {exc}") from exc


def build_sim(cfg: dict) -> SimConfig:
    try:
        return SimConfig(
            dt_max=float(cfg["dt_max"]), y_ext=float(cfg["y_ext"]),
            x_max=None if cfg["x_max"] is None else float(cfg["x_max"]),
            horizon=float(cfg["horizon"]),
            truncation=None if cfg["L"] is None else float(cfg["L"]),
            truncation_y_low=(None if cfg["truncation_y_low"] is None
                              else float(cfg["truncation_y_low"])),
            substep_alpha=float(cfg["substep_alpha"]),
            prop_target=float(cfg["prop_target"]), slack=float(cfg["slack"]),
            qprocess_delta=float(cfg["qprocess_delta"]),
            record_every=int(cfg["record_every"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad numerics field: {exc}") from exc


# subcommands whose outputs rely on the existence/uniqueness guarantees;
# diagnostics and plain path simulation stay runnable on degenerate models
# (e.g. the mutation-free zero-flux control) with a warning instead
GATED_COMMANDS = frozenset({"fv", "lambda", "eta", "qprocess", "oracle"})


def _check_hypotheses(cmd: str, params: ModelParams) -> None:
    report = validate_hypotheses(params)
    ok, missing = report.routing_ok()
    if ok:
        return
    if cmd in GATED_COMMANDS:
        raise HypothesisError(
            "required hypotheses violated: " + ", ".join(missing))
    print(f"warning: required hypotheses violated ({', '.join(missing)}); "
          f"{cmd} runs anyway", file=sys.stderr)


def _key(cfg: dict, *lineage) -> StreamKey:
    return StreamKey(seed=int(cfg["seed"]), lineage=("cli",) + lineage)


# ---------------------------------------------------------------------------
# artifact writers (fixed float formatting so reruns are byte-identical)


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def write_measure_csv(path: Path, m: EmpiricalMeasure) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k+1}" for k in range(m.grid.dim)] + ["y", "mass"])
        for row in m.to_rows():
            writer.writerow([_fmt(c) for c in row])


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out: Path, cfg: dict, artifacts: list[str]) -> None:
    semantic = {k: cfg[k] for k in sorted(cfg) if k not in NON_SEMANTIC_KEYS}
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    write_json(out / "manifest.json", {
        "config": semantic,
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": int(cfg["seed"]),
        "versions": {
            "adaptqsd": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
        "artifacts": sorted(artifacts),
    })


def _lambda_payload(est) -> dict:
    return {
        "lambda0": est.lambda0,
        "stderr": est.lambda0_stderr,
        "kills_in_window": int(est.kills_in_window),
        "n_particles": int(est.n_particles),
        "burn_in_time": est.burn_in_time,
        "window": list(est.window),
        "diagnostics": {k: v for k, v in est.diagnostics.items()
                        if isinstance(v, (int, float, str, bool))},
    }


# ---------------------------------------------------------------------------
# subcommands


def run_validate(cfg: dict, params: ModelParams, sim: SimConfig, out: Path) -> list[str]:
    report = validate_hypotheses(params)
    for line in report.lines():
        print(line)
    write_json(out / "hypotheses.json", {
        "checks": {code: {"status": chk.status, "detail": chk.detail}
                   for code, chk in sorted(report.checks.items())},
        "required": report.required_codes(),
        "ok": report.routing_ok()[0],
    })
    ok, missing = report.routing_ok()
    if not ok:
        raise HypothesisError("required hypotheses violated: " + ", ".join(missing))
    return ["hypotheses.json"]


def run_simulate(cfg: dict, params: ModelParams, sim: SimConfig, out: Path) -> list[str]:
    box = reference_set(params)
    x0, y0 = box.sample(stream(_key(cfg, "simulate", "init")), 1)
    traj = simulate_path((x0[0], float(y0[0])), params, sim, _key(cfg, "simulate"))
    traj.write_csv(out / "trajectory.csv")
    write_json(out / "exit.json", {
        "exit_reason": traj.exit_reason.value,
        "exit_time": traj.exit_time,
        "n_jumps": len(traj.jumps),
    })
    return ["trajectory.csv", "exit.json"]


def _run_fv(cfg: dict, params: ModelParams, sim: SimConfig):
    grid = default_hist_grid(sim, nx=int(cfg["nx"]), ny=int(cfg["ny"]))
    burn = cfg["burn_in"]
    if burn != "auto":
        burn = float(burn)
    return fleming_viot(params, sim, _key(cfg, "fv"),
                        n_particles=int(cfg["particles"]),
                        window=float(cfg["window"]), burn_in=burn, hist_grid=grid)


def run_fv(cfg: dict, params: ModelParams, sim: SimConfig, out: Path) -> list[str]:
    est = _run_fv(cfg, params, sim)
    write_measure_csv(out / "alpha.csv", est.alpha)
    write_json(out / "lambda0.json", _lambda_payload(est))
    return ["alpha.csv", "lambda0.json"]


def run_lambda(cfg: dict, params: ModelParams, sim: SimConfig, out: Path) -> list[str]:
    est = estimate_lambda0_survival("reference", params, sim, _key(cfg, "lambda"),
                                    n_paths=int(cfg["replicates"]),
                                    horizon=float(cfg["lambda_horizon"]))
    write_json(out / "survival.json", {
        "lambda0": est.lambda0,
        "stderr": est.stderr,
        "ci95": list(est.ci95),
        "r_squared": est.r_squared,
        "n_paths": int(est.n_paths),
        "flags": est.flags,
    })
    with open(out / "survival_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "survivors", "in_fit"])
        for t, n, used in zip(est.t_grid, est.survivors, est.fit_mask):
            writer.writerow([_fmt(t), int(n), int(used)])
    return ["survival.json", "survival_curve.csv"]


def _run_eta(cfg: dict, params: ModelParams, sim: SimConfig):
    fv = _run_fv(cfg, params, sim)
    eta = estimate_eta(fv.alpha, fv.lambda0, params, sim, _key(cfg, "eta"),
                       t_eval=float(cfg["eta_t_eval"]),
                       replicates=int(cfg["eta_replicates"]),
                       nodes=(int(cfg["eta_nodes_x"]), int(cfg["eta_nodes_y"])))
    return fv, eta


def _write_eta_csv(path: Path, eta) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "eta", "stderr", "survivors"])
        for i, xv in enumerate(eta.x_nodes):
            for j, yv in enumerate(eta.y_nodes):
                writer.writerow([_fmt(xv), _fmt(yv), _fmt(eta.values[i, j]),
                                 _fmt(eta.stderr[i, j]), int(eta.survivors_t1[i, j])])


def run_eta(cfg: dict, params: ModelParams, sim: SimConfig, out: Path) -> list[str]:
    fv, eta = _run_eta(cfg, params, sim)
    write_measure_csv(out / "alpha.csv", fv.alpha)
    write_json(out / "lambda0.json", _lambda_payload(fv))
    _write_eta_csv(out / "eta.csv", eta)
    write_measure_csv(out / "beta.csv", beta_from(fv.alpha, eta))
    return ["alpha.csv", "lambda0.json", "eta.csv", "beta.csv"]


def run_qprocess(cfg: dict, params: ModelParams, sim: SimConfig, out: Path) -> list[str]:
    fv, eta = _run_eta(cfg, params, sim)
    beta = beta_from(fv.alpha, eta)
    qx, qy, stats = conditioned_marginal(beta, eta, params, sim, _key(cfg, "qmarginal"),
                                         n_walkers=int(cfg["walkers"]),
                                         horizon=float(cfg["q_horizon"]))
    hist = fv.alpha.grid.histogram(qx, qy)
    write_measure_csv(out / "q_marginal.csv",
                      EmpiricalMeasure(fv.alpha.grid, hist / hist.sum(),
                                       n_samples=int(cfg["walkers"])))
    artifacts = ["q_marginal.csv", "beta.csv", "qprocess.json"]
    write_measure_csv(out / "beta.csv", beta)
    for i in range(int(cfg["q_paths"])):
        sx, sy = beta.sample(stream(_key(cfg, "qpath", i, "start")), 1)
        traj = simulate_q_path((sx[0], float(sy[0])), params, sim,
                               _key(cfg, "qpath", i), eta,
                               eta_max=eta.max_value, horizon=float(cfg["q_horizon"]))
        name = f"qpath_{i}.csv"
        traj.write_csv(out / name)
        artifacts.append(name)
    write_json(out / "qprocess.json", {"walkers": int(cfg["walkers"]),
                                       "horizon": float(cfg["q_horizon"]),
                                       "attempt_stats": stats})
    return artifacts


def run_oracle(cfg: dict, params: ModelParams, sim: SimConfig, out: Path) -> list[str]:
    if sim.truncation is None:
        raise ConfigError("oracle needs a truncation half-width L")
    genr = build_generator(params, L=sim.truncation, y_min=sim.y_floor,
                           nx=int(cfg["oracle_nx"]), ny=int(cfg["oracle_ny"]))
    tri = leading_triple(genr)
    write_json(out / "oracle.json", {
        "lambda0": tri.lambda0,
        "residual_alpha": tri.res_alpha,
        "residual_eta": tri.res_eta,
        "iterations": int(tri.iterations),
        "nx": int(cfg["oracle_nx"]),
        "ny": int(cfg["oracle_ny"]),
    })
    write_measure_csv(out / "oracle_alpha.csv", tri.alpha)
    grid = tri.alpha.grid
    with open(out / "oracle_eta.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "eta"])
        eta = tri.eta.reshape(grid.shape)
        for i, xv in enumerate(grid.x_centers):
            for j, yv in enumerate(grid.y_centers):
                writer.writerow([_fmt(xv), _fmt(yv), _fmt(eta[i, j])])
    return ["oracle.json", "oracle_alpha.csv", "oracle_eta.csv"]


def run_diagnose(cfg: dict, params: ModelParams, sim: SimConfig, out: Path) -> list[str]:
    fv = _run_fv(cfg, params, sim)

    def conv_stage():
        start = relaxed_start(params, sim)
        return convergence_curve(start, fv.alpha.coarsen(4, 4), params, sim,
                                 _key(cfg, "convergence"),
                                 n_replicates=int(cfg["conv_replicates"]),
                                 n_particles=int(cfg["conv_particles"]),
                                 t_max=float(cfg["t_max"]),
                                 slice_dt=float(cfg["slice_dt"]))

    def balance_stage():
        return balance_residual(params, sim, _key(cfg, "balance"),
                                n_particles=int(cfg["balance_particles"]),
                                burn=float(cfg["balance_burn"]),
                                collect=float(cfg["balance_collect"]))

    def trunc_stage():
        return truncation_family(params, sim, _key(cfg, "truncation"),
                                 Ls=tuple(float(L) for L in cfg["L_list"]),
                                 n_particles=int(cfg["particles"]),
                                 window=float(cfg["window"]),
                                 nx=int(cfg["nx"]), ny=int(cfg["ny"]))

    stages = (conv_stage, balance_stage, trunc_stage)
    n_workers = max(int(cfg["threads"]), 1)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            curve, bal, fam = [f.result() for f in [pool.submit(s) for s in stages]]
    else:
        curve, bal, fam = [s() for s in stages]

    with open(out / "convergence.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "tv_mean", "tv_se"])
        for t, m, se in zip(curve.t, curve.tv_mean, curve.tv_se):
            writer.writerow([_fmt(t), _fmt(m), _fmt(se)])
    write_json(out / "balance.json", {
        "v": bal.v, "rhs": bal.rhs, "residual": bal.residual,
        "mc_stderr": bal.mc_stderr, "sigmas": bal.sigmas,
        "n_samples": int(bal.n_samples), "n_blocks": int(bal.n_blocks),
    })
    with open(out / "truncation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["L", "lambda_hat", "lambda_se", "tv_to_largest"])
        for i in range(len(fam.L)):
            writer.writerow([_fmt(fam.L[i]), _fmt(fam.lambda_hat[i]),
                             _fmt(fam.lambda_se[i]), _fmt(fam.tv_to_largest[i])])
    write_json(out / "diagnose.json", {
        "lambda0": fv.lambda0,
        "lambda0_stderr": fv.lambda0_stderr,
        "gamma_hat": curve.gamma_hat,
        "gamma_se": curve.gamma_se,
        "convergence_r_squared": curve.r_squared,
        "monotone_violation_rate": curve.monotone_violation_rate(),
        "balance_sigmas": bal.sigmas,
    })
    return ["convergence.csv", "balance.json", "truncation.csv", "diagnose.json"]


RUNNERS = {
    "validate": run_validate,
    "simulate": run_simulate,
    "fv": run_fv,
    "lambda": run_lambda,
    "eta": run_eta,
    "qprocess": run_qprocess,
    "oracle": run_oracle,
    "diagnose": run_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptqsd",
        description="Simulation and estimation for the moving-optimum "
                    "adaptation model with extinction.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="cmd", required=True)
    descriptions = {
        "validate": "check the structural hypotheses and write a report",
        "simulate": "simulate one trajectory to absorption or the horizon",
        "fv": "Fleming-Viot estimate of (alpha, lambda0)",
        "lambda": "lambda0 from the survival-curve regression",
        "eta": "survival-capacity grid (runs fv first)",
        "qprocess": "conditioned-process marginal and sample paths",
        "oracle": "grid-generator eigentriple cross-check",
        "diagnose": "convergence curve, balance residual, truncation family",
    }
    for name, desc in descriptions.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="JSON config path (defaults are built in)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="worker pool size")
        p.add_argument("--out", help="output directory (default: ./out)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (JSON-parsed value)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed, args.threads, args.out)
        params = build_params(cfg)
        sim = build_sim(cfg)
        if args.cmd != "validate":
            _check_hypotheses(args.cmd, params)
        out = Path(cfg["out"])
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output dir {out}: {exc}") from exc
        artifacts = RUNNERS[args.cmd](cfg, params, sim, out)
        write_manifest(out, cfg, artifacts)
    except AdaptQsdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for klass in type(exc).__mro__:
            if klass in EXIT_CODES:
                return EXIT_CODES[klass]
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
