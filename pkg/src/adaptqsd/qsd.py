"""Quasi-stationary estimators built on the vectorized cohort engine.

The stack, bottom to top:

- fleming_viot: interacting ensemble whose time-averaged occupation after
  burn-in estimates the quasi-stationary law alpha and whose kill flux
  estimates the decay rate lambda0;
- estimate_lambda0_survival: independent lambda0 estimate from the survival
  curve of a plain (non-interacting) cohort started from alpha;
- estimate_eta: survival capacity eta on a coarse node grid from per-node
  cohorts, rescaled by e^{lambda0 t} and normalized to <alpha, eta> = 1;
- beta_from: the conditioned-process law beta = eta * alpha;
- conditioned_marginal: ensemble of never-absorbed walkers evolved by
  rejection against eta (the h-transform of the time-discretized kernel);
- convergence_curve, balance_residual, truncation_family: diagnostics for
  the relaxation rate, the speed/flux balance identity, and the truncation
  family consistency.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import Engine, WindowEvents
from .errors import DomainError, MassExtinctionError, NumericError
from .measure import EmpiricalMeasure, HistGrid, tv_distance, tv_noise_floor
from .model import ModelParams, fixation_integral, reference_set
from .pathsim import SimConfig
from .rng import StreamKey, stream

__all__ = [
    "ParticleEnsemble", "QsdEstimate", "SurvivalEstimate", "EtaEstimate",
    "CohortResult", "fleming_viot", "run_cohort", "estimate_lambda0_survival",
    "estimate_eta", "beta_from", "convergence_curve", "balance_residual",
    "truncation_family", "conditioned_marginal", "tv_distance", "tv_noise_floor",
    "default_hist_grid", "relaxed_start",
]


def default_hist_grid(config: SimConfig, nx: int = 80, ny: int = 60,
                      L: float | None = None) -> HistGrid:
    """Histogram grid covering the truncation box (shared with the oracle)."""
    box = L if L is not None else config.truncation
    if box is None:
        raise DomainError("untruncated runs need an explicit histogram grid")
    return HistGrid.for_box(box, y_lo=config.y_floor, nx=nx, ny=ny, dim=1)


@dataclass
class ParticleEnsemble:
    """Mutable particle arrays plus the clock; the unit all runners share."""

    x: np.ndarray
    y: np.ndarray
    alive: np.ndarray
    t: float = 0.0

    @property
    def size(self) -> int:
        return len(self.y)

    @property
    def n_alive(self) -> int:
        return int(np.count_nonzero(self.alive))

    @classmethod
    def from_states(cls, x: np.ndarray, y: np.ndarray) -> "ParticleEnsemble":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        if x.shape[0] != len(y):
            raise DomainError("x and y lengths differ")
        return cls(x=x.copy(), y=y.copy(), alive=np.ones(len(y), dtype=bool))


def _init_states(init, size: int, params: ModelParams, config: SimConfig,
                 gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Resolve an initial-condition spec into (x (n, d), y (n,)) arrays.

    Accepts an EmpiricalMeasure (sampled), "reference" (uniform on the
    canonical reference box), a (x, y) point or array pair, or an explicit
    ParticleEnsemble.
    """
    if isinstance(init, EmpiricalMeasure):
        x, y = init.sample(gen, size)
    elif isinstance(init, str):
        if init != "reference":
            raise DomainError(f"unknown initial condition {init!r}")
        x, y = reference_set(params).sample(gen, size)
    elif isinstance(init, ParticleEnsemble):
        x, y = init.x.copy(), init.y.copy()
    else:
        x0, y0 = init
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if x0.ndim == 1 and np.ndim(y0) == 0:
            x = np.tile(x0, (size, 1))
            y = np.full(size, float(y0))
        else:
            x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
            y = np.asarray(y0, dtype=float).copy()
    if len(y) != size:
        raise DomainError(f"initial condition produced {len(y)} states, expected {size}")
    lo = config.y_floor
    y = np.clip(y, lo * (1.0 + 1e-9), (config.y_top or np.inf) * (1.0 - 1e-9))
    return x, y


# ---------------------------------------------------------------------------
# Fleming-Viot


@dataclass
class QsdEstimate:
    """Output of a Fleming-Viot run, optionally enriched downstream."""

    alpha: EmpiricalMeasure
    lambda0: float
    lambda0_stderr: float
    kills_in_window: int
    n_particles: int
    burn_in_time: float
    window: tuple[float, float]
    kill_log: dict
    diagnostics: dict = field(default_factory=dict)
    lambda0_survival: "SurvivalEstimate | None" = None
    eta: "EtaEstimate | None" = None
    beta: EmpiricalMeasure | None = None

    def lambda_consistency_z(self) -> float:
        """z-score between the kill-flux and survival-curve estimators."""
        if self.lambda0_survival is None:
            raise DomainError("no survival estimate attached")
        se = math.hypot(self.lambda0_stderr, self.lambda0_survival.stderr)
        return abs(self.lambda0 - self.lambda0_survival.lambda0) / max(se, 1e-300)


def fleming_viot(params: ModelParams, config: SimConfig, key: StreamKey,
                 n_particles: int = 2000, window: float = 50.0,
                 burn_in: float | str = "auto", init="reference",
                 hist_grid: HistGrid | None = None, chunk: float = 2.0,
                 plateau_tol: float = 0.05, burn_in_cap: float = 100.0) -> QsdEstimate:
    """Fleming-Viot estimate of (alpha, lambda0) on the truncated domain.

    Killed particles are replaced at window ends by the end-of-window state
    of a uniformly chosen survivor (donor draws come from a dedicated
    resample stream in kill-time order, so the kill/donor log is replayable).
    burn_in="auto" tracks the TV between consecutive chunk occupations and
    declares the transient over when that series stops improving: two chunks
    in a row with either TV below plateau_tol or less than a 10% drop while
    already in the low-TV regime. After that, occupation is averaged over
    `window` more time units.
    """
    if n_particles < 2:
        raise DomainError("need at least 2 particles")
    grid = hist_grid if hist_grid is not None else default_hist_grid(config)
    engine = Engine(params, config)
    dt = config.dt_max
    gen0 = stream(key.child("init"))
    x, y = _init_states(init, n_particles, params, config, gen0)
    alive = np.ones(n_particles, dtype=bool)

    occ = np.zeros(grid.n_cells)
    chunk_occ = np.zeros(grid.n_cells)
    prev_chunk = None
    tv_series: list[tuple[float, float]] = []
    kill_times: list[np.ndarray] = []
    kill_ids: list[np.ndarray] = []
    donor_ids: list[np.ndarray] = []
    mean_y_series: list[float] = []
    burn_done = burn_in != "auto"
    burn_time = float(burn_in) if burn_in != "auto" else None
    plateau_hits = 0
    kills_window = 0
    window_t0 = None
    bound_exceeded = 0
    t = 0.0
    k = 0

    while True:
        if burn_done and burn_time is not None and window_t0 is None and t >= burn_time - 1e-12:
            window_t0 = t
        if window_t0 is not None and t >= window_t0 + window - 1e-12:
            break
        ev = engine.window(x, y, alive, t, dt, stream(key.child("w", k)))
        bound_exceeded += ev.bound_exceeded
        n_dead = len(ev.kill_ids)
        if n_dead:
            surv = np.flatnonzero(alive)
            if len(surv) == 0:
                raise MassExtinctionError("all particles died in one window", time=t)
            g = stream(key.child("resample", k))
            donors = surv[g.integers(0, len(surv), n_dead)]
            x[ev.kill_ids] = x[donors]
            y[ev.kill_ids] = y[donors]
            alive[ev.kill_ids] = True
            kill_times.append(ev.kill_times)
            kill_ids.append(ev.kill_ids)
            donor_ids.append(donors)
            if window_t0 is not None:
                kills_window += n_dead
        t += dt
        k += 1
        idx = grid.cell_index(x, y)
        inside = idx >= 0
        np.add.at(chunk_occ, idx[inside], dt)
        if window_t0 is not None:
            np.add.at(occ, idx[inside], dt)
        mean_y_series.append(float(np.mean(y)))

        if t + 1e-12 >= (len(tv_series) + 1) * chunk:
            cur = chunk_occ / max(chunk_occ.sum(), 1e-300)
            if prev_chunk is not None:
                prev_tv = tv_series[-1][1]
                tv = 0.5 * float(np.abs(cur - prev_chunk).sum())
                tv_series.append((t, tv))
                if not burn_done:
                    # stall test: no 10% improvement while already low
                    stalled = tv > 0.9 * prev_tv and tv < 0.35
                    plateau_hits = plateau_hits + 1 if (tv < plateau_tol or stalled) else 0
                    if plateau_hits >= 2 or t >= burn_in_cap:
                        burn_done = True
                        burn_time = t
            else:
                tv_series.append((t, 1.0))
            prev_chunk = cur
            chunk_occ = np.zeros(grid.n_cells)

    alpha = EmpiricalMeasure(grid=grid, masses=occ.reshape(grid.shape),
                             n_samples=n_particles * window / max(dt, 1e-300))
    duration = t - window_t0
    lam = kills_window / (n_particles * duration)
    lam_se = math.sqrt(max(kills_window, 1)) / (n_particles * duration)
    log = {
        "times": np.concatenate(kill_times) if kill_times else np.empty(0),
        "killed": np.concatenate(kill_ids) if kill_ids else np.empty(0, dtype=np.int64),
        "donors": np.concatenate(donor_ids) if donor_ids else np.empty(0, dtype=np.int64),
    }
    diag = {
        "tv_series": tv_series,
        "bound_exceeded": bound_exceeded,
        "mean_y_series": np.asarray(mean_y_series),
        "plateau_tol": plateau_tol,
        "burn_in_capped": bool(burn_time is not None and burn_time >= burn_in_cap),
    }
    return QsdEstimate(alpha=alpha, lambda0=lam, lambda0_stderr=lam_se,
                       kills_in_window=kills_window, n_particles=n_particles,
                       burn_in_time=float(burn_time), window=(float(window_t0), float(t)),
                       kill_log=log, diagnostics=diag)


# ---------------------------------------------------------------------------
# plain cohorts


@dataclass
class CohortResult:
    """Death times and optional snapshots / jump logs of a plain cohort.

    slices maps a snapshot time to (live_idx, x_live, y_live): the particle
    indices still alive at that time and their states.
    """

    death_times: np.ndarray
    end_x: np.ndarray
    end_y: np.ndarray
    alive: np.ndarray
    slices: dict[float, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)
    jump_w: np.ndarray | None = None
    jump_norm_before: np.ndarray | None = None
    jump_norm_after: np.ndarray | None = None
    jump_times: np.ndarray | None = None
    total_time_alive: float = 0.0

    def survival(self, t: float) -> float:
        return float(np.mean(self.death_times > t))


def run_cohort(x0: np.ndarray, y0: np.ndarray, params: ModelParams, config: SimConfig,
               horizon: float, key: StreamKey, record_slices=(),
               collect_jumps: bool = False) -> CohortResult:
    """Advance a non-interacting cohort to the horizon, recording death times.

    record_slices: times at which the alive states are snapshotted (snapped
    to the next window end).
    """
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    y = np.asarray(y0, dtype=float).copy()
    n = len(y)
    alive = np.ones(n, dtype=bool)
    death = np.full(n, np.inf)
    engine = Engine(params, config)
    dt = config.dt_max
    n_win = int(math.ceil(horizon / dt - 1e-9))
    slices = sorted(float(s) for s in record_slices)
    out_slices: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    jw, jnb, jna, jt = [], [], [], []
    si = 0
    t = 0.0
    alive_time = 0.0
    for k in range(n_win):
        step = min(dt, horizon - t)
        alive_time += step * np.count_nonzero(alive)
        ev = engine.window(x, y, alive, t, step, stream(key.child("w", k)))
        if len(ev.kill_ids):
            death[ev.kill_ids] = ev.kill_times
        if collect_jumps and len(ev.jump_ids):
            jw.append(ev.jump_w)
            jnb.append(ev.jump_norm_before)
            jna.append(ev.jump_norm_after)
            jt.append(ev.jump_times)
        t += step
        while si < len(slices) and t + 1e-12 >= slices[si]:
            live = np.flatnonzero(alive)
            out_slices[slices[si]] = (live, x[live].copy(), y[live].copy())
            si += 1
        if not alive.any():
            empty = (np.empty(0, dtype=np.int64), np.empty((0, params.dim)), np.empty(0))
            while si < len(slices):
                out_slices[slices[si]] = empty
                si += 1
            break
    return CohortResult(
        death_times=death, end_x=x, end_y=y, alive=alive, slices=out_slices,
        jump_w=np.concatenate(jw) if jw else (np.empty((0, params.dim)) if collect_jumps else None),
        jump_norm_before=np.concatenate(jnb) if jnb else (np.empty(0) if collect_jumps else None),
        jump_norm_after=np.concatenate(jna) if jna else (np.empty(0) if collect_jumps else None),
        jump_times=np.concatenate(jt) if jt else (np.empty(0) if collect_jumps else None),
        total_time_alive=alive_time,
    )


# ---------------------------------------------------------------------------
# lambda0 from the survival curve


@dataclass
class SurvivalEstimate:
    lambda0: float
    stderr: float
    ci95: tuple[float, float]
    r_squared: float
    t_grid: np.ndarray
    survivors: np.ndarray
    n_paths: int
    fit_mask: np.ndarray
    flags: list[str] = field(default_factory=list)


def estimate_lambda0_survival(init, params: ModelParams, config: SimConfig, key: StreamKey,
                              n_paths: int = 5000, horizon: float = 8.0,
                              t_grid: np.ndarray | None = None,
                              min_survivors: int = 10, n_bootstrap: int = 200) -> SurvivalEstimate:
    """lambda0 from weighted log-linear regression of the survival curve.

    init should be (close to) the quasi-stationary law; started there the
    survival probability is exponential from t = 0, which is what makes the
    whole curve usable for the fit.
    """
    if n_paths < 1000:
        flags = ["n_paths below the recommended 1000"]
    else:
        flags = []
    gen = stream(key.child("init"))
    x0, y0 = _init_states(init, n_paths, params, config, gen)
    res = run_cohort(x0, y0, params, config, horizon, key.child("cohort"))
    death = res.death_times
    if t_grid is None:
        t_grid = np.geomspace(0.25, horizon, 24)
    t_grid = np.asarray(t_grid, dtype=float)

    def fit(death_times):
        surv = np.array([np.count_nonzero(death_times > tt) for tt in t_grid], dtype=float)
        s = surv / len(death_times)
        mask = surv >= min_survivors
        if mask.sum() < 4:
            raise NumericError("too few usable survival points",
                               diagnostics={"usable": int(mask.sum())})
        ts, ss = t_grid[mask], s[mask]
        var = np.maximum((1.0 - ss) + 1.0 / len(death_times), 1e-12) / (len(death_times) * ss)
        wts = 1.0 / var
        coef = np.polyfit(ts, np.log(ss), 1, w=np.sqrt(wts))
        return coef, mask, s, surv

    coef, mask, s, surv = fit(death)
    lam = -float(coef[0])
    pred = np.polyval(coef, t_grid[mask])
    resid = np.log(s[mask]) - pred
    ss_tot = float(np.sum((np.log(s[mask]) - np.log(s[mask]).mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / max(ss_tot, 1e-300)

    boot_gen = stream(key.child("bootstrap"))
    slopes = []
    for _ in range(n_bootstrap):
        sample = death[boot_gen.integers(0, n_paths, n_paths)]
        try:
            c, *_ = fit(sample)
            slopes.append(-float(c[0]))
        except NumericError:
            continue
    se = float(np.std(slopes)) if len(slopes) > 10 else float("nan")
    return SurvivalEstimate(lambda0=lam, stderr=se,
                            ci95=(lam - 1.96 * se, lam + 1.96 * se),
                            r_squared=r2, t_grid=t_grid, survivors=surv,
                            n_paths=n_paths, fit_mask=mask, flags=flags)


# ---------------------------------------------------------------------------
# survival capacity eta


def _bilinear(x_nodes: np.ndarray, y_nodes: np.ndarray, values: np.ndarray,
              x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation in (x, log y), clamped at the node hull."""
    x1 = np.atleast_2d(np.asarray(x, dtype=float))[:, 0]
    ly = np.log(np.maximum(np.asarray(y, dtype=float), 1e-300))
    lyn = np.log(y_nodes)
    i = np.clip(np.searchsorted(x_nodes, x1) - 1, 0, len(x_nodes) - 2)
    j = np.clip(np.searchsorted(lyn, ly) - 1, 0, len(lyn) - 2)
    wx = np.clip((x1 - x_nodes[i]) / (x_nodes[i + 1] - x_nodes[i]), 0.0, 1.0)
    wy = np.clip((ly - lyn[j]) / (lyn[j + 1] - lyn[j]), 0.0, 1.0)
    return ((1 - wx) * (1 - wy) * values[i, j] + wx * (1 - wy) * values[i + 1, j]
            + (1 - wx) * wy * values[i, j + 1] + wx * wy * values[i + 1, j + 1])


@dataclass
class EtaEstimate:
    """Survival capacity on a coarse node grid, callable via bilinear
    interpolation in (x, log y).

    values / values_t2 hold the refined estimate and its independent-leg
    second-horizon counterpart; values_direct1 / values_direct2 keep the
    plain e^{lambda t} * survivor-fraction statistics at both horizons.
    """

    x_nodes: np.ndarray
    y_nodes: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    survivors_t1: np.ndarray
    survivors_t2: np.ndarray
    values_t2: np.ndarray
    stderr_t2: np.ndarray
    t_eval: float
    lambda0_used: float
    values_direct1: np.ndarray | None = None
    values_direct2: np.ndarray | None = None
    iterations_used: int = 0
    norm_inner: float = 1.0

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return _bilinear(self.x_nodes, self.y_nodes, self.values, x, y)

    @property
    def max_value(self) -> float:
        return float(self.values.max())

    @property
    def zero_nodes(self) -> np.ndarray:
        """Mask of nodes with no survivors at t_eval (eta pinned to 0 there)."""
        return self.survivors_t1 == 0

    def consistency_z(self) -> np.ndarray:
        """Two-horizon z-scores |eta_t1 - eta_t2| / combined SE per node."""
        se = np.sqrt(self.stderr**2 + self.stderr_t2**2)
        return np.abs(self.values - self.values_t2) / np.maximum(se, 1e-300)


def eta_node_grid(grid: HistGrid, nx: int = 30, ny: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Node locations: cell centers of an (nx, ny) coarsening of the box."""
    sub = HistGrid(dim=grid.dim, x_lo=grid.x_lo, x_hi=grid.x_hi, nx=nx,
                   y_lo=grid.y_lo, y_hi=grid.y_hi, ny=ny, y_spacing=grid.y_spacing)
    return sub.x_centers, sub.y_centers


def estimate_eta(alpha: EmpiricalMeasure, lambda0: float, params: ModelParams,
                 config: SimConfig, key: StreamKey, t_eval: float = 2.0,
                 replicates: int = 3000, nodes: tuple[int, int] = (30, 20),
                 batch_nodes: int = 60, iterations: int = 40,
                 iter_tol: float = 0.004) -> EtaEstimate:
    """Survival capacity eta(x, y) = lim e^{lambda0 t} P_{x,y}(alive at t).

    Per node, `replicates` paths run to 2 t_eval, recording survival and the
    survivor endpoints at both horizons. The direct statistic
    e^{lambda0 t} * survivor fraction is transient-biased at affordable
    horizons, so the returned values apply the eigen fixed point: iterate
    eta <- e^{lambda0 t_eval} * mean(alive * eta(endpoint at t_eval)),
    renormalizing <alpha, eta> = 1 each pass (this also absorbs the scale
    drift from an imperfect lambda0), until the node values settle.
    iterations=0 returns the plain direct statistic. The t2 fields apply the
    final interpolant through the 2 t_eval endpoints as a second-horizon
    consistency leg.
    """
    xn, yn = eta_node_grid(alpha.grid, *nodes)
    gx, gy = len(xn), len(yn)
    n_nodes = gx * gy
    R = replicates
    t2 = 2.0 * t_eval
    e1 = math.exp(lambda0 * t_eval)
    e2 = math.exp(lambda0 * t2)
    sv1 = np.zeros(n_nodes, dtype=np.int64)
    sv2 = np.zeros(n_nodes, dtype=np.int64)
    end1_node: list[tuple[np.ndarray, np.ndarray]] = [None] * n_nodes
    end2_node: list[tuple[np.ndarray, np.ndarray]] = [None] * n_nodes
    for b0 in range(0, n_nodes, batch_nodes):
        batch = range(b0, min(b0 + batch_nodes, n_nodes))
        nb = len(batch)
        x0 = np.zeros((nb * R, params.dim))
        y0 = np.empty(nb * R)
        for bi, node in enumerate(batch):
            i, j = divmod(node, gy)
            x0[bi * R:(bi + 1) * R, 0] = xn[i]
            y0[bi * R:(bi + 1) * R] = yn[j]
        res = run_cohort(x0, y0, params, config, t2, key.child("batch", b0),
                         record_slices=(t_eval, t2))
        for snap_t, store, counts in ((t_eval, end1_node, sv1), (t2, end2_node, sv2)):
            live, lx, ly = res.slices[snap_t]
            owner = live // R
            for bi, node in enumerate(batch):
                sel = owner == bi
                store[node] = (lx[sel], ly[sel])
                counts[node] = int(np.count_nonzero(sel))

    alpha_w = alpha.masses.ravel()
    g = alpha.grid
    cell_x = np.repeat(g.x_centers, g.ny)[:, None]
    cell_y = np.tile(g.y_centers, g.nx)

    def normalized(v_flat):
        inner = float(np.dot(alpha_w, _bilinear(xn, yn, v_flat.reshape(gx, gy), cell_x, cell_y)))
        if inner <= 0.0:
            raise NumericError("alpha-eta inner product not positive")
        return v_flat / inner, inner

    direct1 = e1 * sv1 / R
    direct2 = e2 * sv2 / R
    if iterations == 0:
        # plain statistic; SE is the binomial error of the survivor fraction
        vals, inner = normalized(direct1.copy())
        p1, p2 = sv1 / R, sv2 / R
        se = e1 * np.sqrt(np.maximum(p1 * (1 - p1), 1.0 / R) / R) / inner
        vals_t2 = direct2 / inner
        se_t2 = e2 * np.sqrt(np.maximum(p2 * (1 - p2), 1.0 / R) / R) / inner
        iters_done = 0
    else:
        vals, _ = normalized(direct2.copy())
        iters_done = 0
        # slow-transient regions (advection-dominated) settle late, so the
        # stopping rule must watch every node with usable endpoint data
        active = sv1 >= max(20, int(0.005 * R))
        for it in range(iterations):
            grid_vals = vals.reshape(gx, gy)
            new = np.empty(n_nodes)
            for node in range(n_nodes):
                lx, ly = end1_node[node]
                new[node] = e1 * float(np.sum(_bilinear(xn, yn, grid_vals, lx, ly))) / R
            new, _ = normalized(new)
            watch = active & (vals > 0)
            delta = float(np.max(np.abs(new[watch] - vals[watch]) / vals[watch])) if watch.any() else 0.0
            vals = new
            iters_done = it + 1
            if delta < iter_tol:
                break
        # per-node SE of the last application (interpolant held fixed)
        grid_vals = vals.reshape(gx, gy)
        se = np.empty(n_nodes)
        vals_t2 = np.empty(n_nodes)
        se_t2 = np.empty(n_nodes)
        for node in range(n_nodes):
            lx, ly = end1_node[node]
            ev = _bilinear(xn, yn, grid_vals, lx, ly)
            m = float(np.sum(ev)) / R
            m2 = float(np.sum(ev**2)) / R
            se[node] = e1 * math.sqrt(max(m2 - m * m, (0.5 / R) ** 2) / R)
            lx2, ly2 = end2_node[node]
            ev2 = _bilinear(xn, yn, grid_vals, lx2, ly2)
            mm = float(np.sum(ev2)) / R
            mm2 = float(np.sum(ev2**2)) / R
            vals_t2[node] = e2 * mm
            se_t2[node] = e2 * math.sqrt(max(mm2 - mm * mm, (0.5 / R) ** 2) / R)
        vals_t2, norm2 = normalized(vals_t2)
        se_t2 = se_t2 / norm2

    return EtaEstimate(x_nodes=xn, y_nodes=yn,
                       values=vals.reshape(gx, gy), stderr=se.reshape(gx, gy),
                       survivors_t1=sv1.reshape(gx, gy), survivors_t2=sv2.reshape(gx, gy),
                       values_t2=vals_t2.reshape(gx, gy), stderr_t2=se_t2.reshape(gx, gy),
                       t_eval=t_eval, lambda0_used=lambda0,
                       values_direct1=direct1.reshape(gx, gy),
                       values_direct2=direct2.reshape(gx, gy),
                       iterations_used=iters_done)


def _alpha_eta_inner(alpha: EmpiricalMeasure, eta: EtaEstimate) -> float:
    g = alpha.grid
    xc = np.repeat(g.x_centers, g.ny)[:, None]
    yc = np.tile(g.y_centers, g.nx)
    vals = eta(xc, yc)
    return float(np.dot(alpha.masses.ravel(), vals))


def beta_from(alpha: EmpiricalMeasure, eta: EtaEstimate) -> EmpiricalMeasure:
    """beta = eta * alpha, renormalized on alpha's grid."""
    g = alpha.grid
    xc = np.repeat(g.x_centers, g.ny)[:, None]
    yc = np.tile(g.y_centers, g.nx)
    weights = eta(xc, yc).reshape(g.shape)
    masses = alpha.masses * weights
    if masses.sum() <= EmpiricalMeasure.MIN_TOTAL:
        raise DomainError("beta degenerate: alpha and eta have disjoint support")
    return EmpiricalMeasure(grid=g, masses=masses, n_samples=alpha.n_samples)


# ---------------------------------------------------------------------------
# convergence diagnostics


@dataclass
class ConvergenceCurve:
    t: np.ndarray
    tv_mean: np.ndarray
    tv_se: np.ndarray
    gamma_hat: float
    gamma_se: float
    r_squared: float
    floor: float
    per_replicate: np.ndarray

    def decay_end(self) -> int:
        """Index of the first slice at the plateau (floor + 1 SE), inclusive.

        Past this point the curve is stationary sampling noise around the
        floor, not decay, so monotonicity checks stop here.
        """
        at_floor = self.tv_mean <= self.floor + self.tv_se
        hits = np.flatnonzero(at_floor)
        return int(hits[0]) if len(hits) else len(self.tv_mean) - 1

    def monotone_violation_rate(self, sigmas: float = 1.0) -> float:
        """Fraction of adjacent pairs on the decaying segment that rise by
        more than `sigmas` joint standard errors."""
        end = self.decay_end()
        if end < 1:
            return 0.0
        tv = self.tv_mean[:end + 1]
        se = self.tv_se[:end + 1]
        diffs = np.diff(tv)
        tol = sigmas * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
        return float(np.mean(diffs > tol))


def convergence_curve(init, reference: EmpiricalMeasure, params: ModelParams,
                      config: SimConfig, key: StreamKey, n_replicates: int = 8,
                      n_particles: int = 500, t_max: float = 10.0,
                      slice_dt: float = 1.0) -> ConvergenceCurve:
    """TV(conditioned law at t, reference alpha) via replicate FV ensembles.

    Each replicate runs an independent Fleming-Viot population from `init`
    and histograms its occupation chunk by chunk; the conditioned law at
    slice midpoints is compared to the reference in TV. The decay rate
    gamma_hat comes from a log-linear fit above the plateau floor.
    """
    grid = reference.grid
    ts = np.arange(slice_dt, t_max + 1e-9, slice_dt)
    curves = np.zeros((n_replicates, len(ts)))
    engine = Engine(params, config)
    dt = config.dt_max
    for rep in range(n_replicates):
        gen0 = stream(key.child("rep", rep, "init"))
        x, y = _init_states(init, n_particles, params, config, gen0)
        alive = np.ones(n_particles, dtype=bool)
        occ = np.zeros(grid.n_cells)
        t = 0.0
        k = 0
        si = 0
        while si < len(ts):
            ev = engine.window(x, y, alive, t, dt, stream(key.child("rep", rep, "w", k)))
            if len(ev.kill_ids):
                surv = np.flatnonzero(alive)
                if len(surv) == 0:
                    raise MassExtinctionError("replicate died out", time=t)
                g = stream(key.child("rep", rep, "rs", k))
                donors = surv[g.integers(0, len(surv), len(ev.kill_ids))]
                x[ev.kill_ids] = x[donors]
                y[ev.kill_ids] = y[donors]
                alive[ev.kill_ids] = True
            t += dt
            k += 1
            idx = grid.cell_index(x, y)
            np.add.at(occ, idx[idx >= 0], dt)
            if t + 1e-12 >= ts[si]:
                curves[rep, si] = tv_distance(occ.reshape(grid.shape), reference.masses)
                occ = np.zeros(grid.n_cells)
                si += 1
    tv_mean = curves.mean(axis=0)
    tv_se = curves.std(axis=0, ddof=1) / math.sqrt(n_replicates)
    floor = float(tv_mean[-2:].mean())
    usable = tv_mean > 2.0 * floor
    if usable.sum() >= 3:
        lt = np.log(tv_mean[usable] - floor)
        coef, cov = np.polyfit(ts[usable], lt, 1, cov=True)
        gamma = -float(coef[0])
        gamma_se = float(np.sqrt(cov[0, 0]))
        pred = np.polyval(coef, ts[usable])
        ss_tot = float(np.sum((lt - lt.mean()) ** 2))
        r2 = 1.0 - float(np.sum((lt - pred) ** 2)) / max(ss_tot, 1e-300)
    else:
        gamma, gamma_se, r2 = float("nan"), float("nan"), float("nan")
    return ConvergenceCurve(t=ts, tv_mean=tv_mean, tv_se=tv_se, gamma_hat=gamma,
                            gamma_se=gamma_se, r_squared=r2, floor=floor,
                            per_replicate=curves)


# ---------------------------------------------------------------------------
# balance identity


@dataclass
class BalanceReport:
    v: float
    rhs: float
    residual: float
    mc_stderr: float
    quad_tol: float
    n_samples: int
    n_blocks: int

    @property
    def sigmas(self) -> float:
        return abs(self.residual) / max(self.mc_stderr, 1e-300)


def balance_residual(params: ModelParams, config: SimConfig, key: StreamKey,
                     n_particles: int = 400, burn: float = 30.0,
                     collect: float = 100.0, sample_dt: float = 0.5,
                     n_blocks: int = 20, init=None) -> BalanceReport:
    """Residual of the speed/flux identity v = E_alpha[f(y) J1(x)].

    J1(x) = integral of w1 g(x, w) nu(dw). The expectation is a time average
    over a stationary ensemble; the MC error comes from block means over
    time, which absorbs the autocorrelation.
    """
    engine = Engine(params, config)
    dt = config.dt_max
    if init is None:
        # capped below any ceiling; the raw equilibrium may sit outside a
        # truncated box, where a point start is killed immediately
        init = relaxed_start(params, config)
    gen0 = stream(key.child("init"))
    x, y = _init_states(init, n_particles, params, config, gen0)
    alive = np.ones(n_particles, dtype=bool)
    t = 0.0
    k = 0
    horizon = burn + collect
    next_sample = burn
    samples: list[float] = []
    sample_times: list[float] = []
    j1_cache: dict[float, float] = {}
    while t < horizon - 1e-12:
        ev = engine.window(x, y, alive, t, dt, stream(key.child("w", k)))
        if len(ev.kill_ids):
            surv = np.flatnonzero(alive)
            if len(surv) == 0:
                raise MassExtinctionError("balance ensemble died out", time=t)
            g = stream(key.child("rs", k))
            donors = surv[g.integers(0, len(surv), len(ev.kill_ids))]
            x[ev.kill_ids] = x[donors]
            y[ev.kill_ids] = y[donors]
            alive[ev.kill_ids] = True
        t += dt
        k += 1
        if t + 1e-12 >= next_sample and next_sample < horizon:
            fy = np.asarray(params.f(y))
            j1 = np.array([_j1_cached(float(xi[0]), params, j1_cache) for xi in x])
            samples.append(float(np.mean(fy * j1)))
            sample_times.append(t)
            next_sample += sample_dt
    samples_arr = np.asarray(samples)
    blocks = np.array_split(samples_arr, n_blocks)
    block_means = np.array([b.mean() for b in blocks if len(b)])
    rhs = float(samples_arr.mean())
    se = float(block_means.std(ddof=1) / math.sqrt(len(block_means)))
    return BalanceReport(v=params.v, rhs=rhs, residual=params.v - rhs,
                         mc_stderr=se, quad_tol=1e-6,
                         n_samples=len(samples_arr) * n_particles,
                         n_blocks=len(block_means))


def _j1_cached(x1: float, params: ModelParams, cache: dict, decimals: int = 3) -> float:
    keyv = round(x1, decimals)
    if keyv not in cache:
        cache[keyv] = fixation_integral(np.array([keyv]), params, weight="w1")
    return cache[keyv]


def _bulk_equilibrium_y(params: ModelParams) -> float:
    from .model import y_equilibrium
    ystar = y_equilibrium(params.growth.r_sup, params.gamma)
    if ystar is None:
        raise DomainError("no stable bulk equilibrium for these parameters")
    return ystar


def relaxed_start(params: ModelParams, config: SimConfig,
                  ceiling_margin: float = 0.9) -> tuple[np.ndarray, float]:
    """Point start for a zero-lag population at its stable size.

    Returns (x0, y0) with x0 = 0 and y0 the stable equilibrium of the size
    drift at full growth rate. A truncated domain may place that equilibrium
    at or above the absorbing ceiling, where a point start would be killed
    within the first step; in that case y0 is capped at ceiling_margin times
    the ceiling.
    """
    ystar = _bulk_equilibrium_y(params)
    top = config.y_top
    if top is not None:
        ystar = min(ystar, ceiling_margin * top)
    return np.zeros(params.dim), ystar


# ---------------------------------------------------------------------------
# truncation family


@dataclass
class TruncationFamily:
    L: np.ndarray
    lambda_hat: np.ndarray
    lambda_se: np.ndarray
    tv_to_largest: np.ndarray
    estimates: list[QsdEstimate]


def truncation_family(params: ModelParams, base_config: SimConfig, key: StreamKey,
                      Ls=(2.5, 3.0, 4.0, 5.0), n_particles: int = 2000,
                      window: float = 50.0, nx: int = 80, ny: int = 60) -> TruncationFamily:
    """Fleming-Viot across a family of truncation boxes on one shared grid.

    All runs are histogrammed on the largest box's grid, so the TV column is
    directly comparable. The y floor follows the base config's convention.
    """
    Ls = sorted(float(v) for v in Ls)
    grid = HistGrid.for_box(Ls[-1], y_lo=base_config.y_floor, nx=nx, ny=ny, dim=1)
    runs = []
    for L in Ls:
        cfg = replace(base_config, truncation=L)
        est = fleming_viot(params, cfg, key.child("L", str(L)), n_particles=n_particles,
                           window=window, hist_grid=grid)
        runs.append(est)
    ref = runs[-1].alpha
    tvs = np.array([tv_distance(r.alpha, ref) for r in runs])
    return TruncationFamily(
        L=np.asarray(Ls),
        lambda_hat=np.array([r.lambda0 for r in runs]),
        lambda_se=np.array([r.lambda0_stderr for r in runs]),
        tv_to_largest=tvs,
        estimates=runs,
    )


# ---------------------------------------------------------------------------
# conditioned ensemble (vectorized h-transform rejection)


def conditioned_marginal(start: EmpiricalMeasure, eta: EtaEstimate, params: ModelParams,
                         config: SimConfig, key: StreamKey, n_walkers: int = 500,
                         horizon: float = 20.0, max_attempts: int = 2000,
                         ratio_cap: float = 50.0, batch_slots: int = 16
                         ) -> tuple[np.ndarray, np.ndarray, dict]:
    """Evolve never-absorbed walkers by h-transform rejection; returns the
    terminal states (x, y) and attempt statistics.

    Per macro step of length config.qprocess_delta each pending walker draws
    unconditioned candidate segments; candidates that die are rejected,
    survivors are accepted with probability eta(endpoint)/ceiling. The
    per-attempt acceptance equals eta(start)/ceiling, so the ceiling is the
    state-dependent min(eta_max, ratio_cap * eta(start)): low-eta walkers
    keep a bounded expected attempt count (~ratio_cap) instead of stalling.
    Candidate endpoints above the ceiling are accepted outright and counted
    in stats["ceiling_violations"] (candidate-level count).

    batch_slots candidates per pending walker are simulated per round; the
    accepted one is the first accepting slot in slot order, which reproduces
    sequential-attempt semantics while amortizing the per-call overhead.
    """
    delta = config.qprocess_delta
    n_steps = int(round(horizon / delta))
    engine = Engine(params, config)
    n_win = max(int(round(delta / config.dt_max)), 1)
    dt = delta / n_win
    eta_max = eta.max_value
    gen0 = stream(key.child("init"))
    x, y = _init_states(start, n_walkers, params, config, gen0)
    attempts_hist: list[int] = []
    violations = 0
    K = max(int(batch_slots), 1)
    max_rounds = max(max_attempts // K, 1)
    for step in range(n_steps):
        pending = np.arange(n_walkers)
        ceiling_all = np.minimum(eta_max, ratio_cap * eta(x, y))
        if np.any(ceiling_all <= 0.0):
            raise NumericError("conditioned walker reached a zero-weight state",
                               diagnostics={"step": step,
                                            "count": int(np.sum(ceiling_all <= 0.0))})
        rounds = 0
        while len(pending) and rounds < max_rounds:
            m = len(pending)
            cx = np.tile(x[pending], (K, 1))
            cy = np.tile(y[pending], K)
            calive = np.ones(K * m, dtype=bool)
            for k in range(n_win):
                engine.window(cx, cy, calive, step * delta + k * dt, dt,
                              stream(key.child("s", step, "r", rounds, "w", k)))
            hv = np.zeros(K * m)
            live = np.flatnonzero(calive)
            if len(live):
                hv[live] = eta(cx[live], cy[live])
            ceil = np.tile(ceiling_all[pending], K)
            violations += int(np.count_nonzero(calive & (hv > ceil)))
            u = stream(key.child("s", step, "r", rounds, "acc")).random(K * m)
            ok = (calive & (hv > 0.0) & (u * ceil <= hv)).reshape(K, m)
            any_ok = ok.any(axis=0)
            if any_ok.any():
                first_slot = np.argmax(ok, axis=0)
                cols = np.flatnonzero(any_ok)
                sel = first_slot[cols] * m + cols
                ids = pending[cols]
                x[ids] = cx[sel]
                y[ids] = cy[sel]
            pending = pending[~any_ok]
            rounds += 1
        attempts_hist.append(rounds * K)
        if len(pending):
            raise NumericError("conditioned walkers exhausted the retry budget",
                               diagnostics={"step": step, "stuck": len(pending)})
    stats = {"max_attempt_rounds": int(max(attempts_hist)),
             "mean_attempt_rounds": float(np.mean(attempts_hist)),
             "ceiling_violations": violations}
    return x, y, stats
