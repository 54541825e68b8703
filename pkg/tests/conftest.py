"""Shared fixtures for the acceptance suite.

The heavy estimator runs (Fleming-Viot population, survival cohort, grid
eigentriple, survival-capacity grid, conditioned ensemble) are built once per
session and shared across the acceptance tests; each records a one-line
verdict that is printed in the terminal summary.
"""
from __future__ import annotations

import pytest

from adaptqsd.model import default_params
from adaptqsd.oracle import build_generator, leading_triple
from adaptqsd.pathsim import SimConfig
from adaptqsd.qsd import (beta_from, conditioned_marginal, default_hist_grid,
                          estimate_eta, estimate_lambda0_survival, fleming_viot)
from adaptqsd.rng import StreamKey

ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


@pytest.fixture(scope="session")
def criterion_report():
    def record(num: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append((num, ok, detail))
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_LINES):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num:02d}: {status}  {detail}")


@pytest.fixture(scope="session")
def acc_params():
    return default_params()


@pytest.fixture(scope="session")
def acc_config():
    return SimConfig(truncation=4.0, truncation_y_low=1e-3)


@pytest.fixture(scope="session")
def acc_oracle(acc_params):
    genr = build_generator(acc_params, L=4.0, y_min=1e-3, nx=80, ny=60)
    return genr, leading_triple(genr)


@pytest.fixture(scope="session")
def acc_fv(acc_params, acc_config):
    grid = default_hist_grid(acc_config)
    return fleming_viot(acc_params, acc_config, StreamKey(seed=11, lineage=("fv",)),
                        n_particles=2000, window=50.0, hist_grid=grid)


@pytest.fixture(scope="session")
def acc_fv_fine(acc_params, acc_config):
    # Same population, window, burn-in rule, stream family, and histogram grid
    # as acc_fv, but with the path step refined until the integrator bias is
    # below the grid reference's own discretization floor.  Used only by the
    # direct alpha/lambda0 grid comparisons; the pipeline criteria keep the
    # shipped default step.
    config = SimConfig(truncation=4.0, truncation_y_low=1e-3, dt_max=0.0025)
    grid = default_hist_grid(acc_config)
    return fleming_viot(acc_params, config, StreamKey(seed=11, lineage=("fv",)),
                        n_particles=2000, window=50.0, hist_grid=grid)


@pytest.fixture(scope="session")
def acc_survival(acc_fv, acc_params, acc_config):
    return estimate_lambda0_survival(acc_fv.alpha, acc_params, acc_config,
                                     StreamKey(seed=11, lineage=("surv",)),
                                     n_paths=5000, horizon=8.0)


@pytest.fixture(scope="session")
def acc_eta(acc_fv, acc_params, acc_config):
    return estimate_eta(acc_fv.alpha, acc_fv.lambda0, acc_params, acc_config,
                        StreamKey(seed=11, lineage=("eta",)),
                        t_eval=2.0, replicates=3000)


@pytest.fixture(scope="session")
def acc_beta(acc_fv, acc_eta):
    return beta_from(acc_fv.alpha, acc_eta)


@pytest.fixture(scope="session")
def acc_q_marginal(acc_beta, acc_eta, acc_params, acc_config):
    return conditioned_marginal(acc_beta, acc_eta, acc_params, acc_config,
                                StreamKey(seed=11, lineage=("qmar",)),
                                n_walkers=500, horizon=20.0)
