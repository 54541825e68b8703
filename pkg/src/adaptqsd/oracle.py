"""Independent d = 1 cross-check on a sparse sub-Markov grid generator.

The truncated process on B(0, L) x [y_min, L] is discretized on the cell
centers of the same histogram grid the particle estimators use (so every
comparison is bin-for-bin): nonuniform central differences for the (1/2) d2/dy2
term, first-order upwind for the y-drift and the -v x-transport, and a banded
jump stencil with targets rounded to cell centers. Probability flux through
any edge of the box, and jump mass landing outside it, feed an implicit kill
state, making row sums nonpositive (sub-Markov).

The leading eigentriple (lambda0, alpha, eta) comes from power iteration on
the resolvent (I - delta Q)^{-1} (one sparse LU, forward solves for eta,
transpose solves for alpha). Time propagation for the consistency checks uses
Crank-Nicolson substeps sized for 1e-6 relative accuracy.

Everything here is deliberately disjoint from the simulation code path: no
thinning, no random numbers, no shared stepping logic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import DomainError, NumericError
from .measure import EmpiricalMeasure, HistGrid
from .model import ModelParams, drift_y, fixation_integral

__all__ = ["GridGenerator", "OracleTriple", "build_generator", "leading_triple",
           "survival_consistency", "oracle_q_kernel", "QKernelCheck"]


@dataclass
class GridGenerator:
    """Assembled sub-Markov generator and its grid."""

    grid: HistGrid
    params: ModelParams
    Q: sp.csr_matrix
    kill_rate: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return self.Q.shape[0]

    def vec_to_grid(self, v: np.ndarray) -> np.ndarray:
        """Internal flat order (x fastest) -> (nx, ny) array."""
        return v.reshape(self.grid.ny, self.grid.nx).T

    def grid_to_vec(self, m: np.ndarray) -> np.ndarray:
        return np.asarray(m).T.ravel()


@dataclass
class OracleTriple:
    """Leading eigentriple of a GridGenerator."""

    lambda0: float
    alpha: EmpiricalMeasure
    eta: np.ndarray
    res_alpha: float
    res_eta: float
    iterations: int
    delta: float

    def beta(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(grid=self.alpha.grid, masses=self.alpha.masses * self.eta)


def build_generator(params: ModelParams, L: float, y_min: float = 1e-3,
                    nx: int = 80, ny: int = 60, jump_sigmas: float = 8.0,
                    scc_min_frac: float = 0.9) -> GridGenerator:
    """Assemble the generator for the box B(0, L) x [y_min, L]."""
    if params.dim != 1:
        raise DomainError("grid oracle is implemented for d = 1")
    if not (0.0 < y_min < L):
        raise DomainError("need 0 < y_min < L")
    grid = HistGrid.for_box(L, y_lo=y_min, nx=nx, ny=ny, dim=1)
    xc = grid.x_centers
    yc = grid.y_centers
    hx = xc[1] - xc[0]
    N = nx * ny
    v = params.v

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    kill = np.zeros(N)

    def flat(i, j):
        return j * nx + i

    ii = np.arange(nx)
    jj = np.arange(ny)

    # --- y diffusion (coefficient 1/2) and y drift (upwind), column by column
    h_minus = np.empty(ny)
    h_plus = np.empty(ny)
    h_minus[1:] = yc[1:] - yc[:-1]
    h_minus[0] = yc[1] - yc[0]
    h_plus[:-1] = yc[1:] - yc[:-1]
    h_plus[-1] = yc[-1] - yc[-2]

    up_rate = 1.0 / (h_plus * (h_minus + h_plus))
    dn_rate = 1.0 / (h_minus * (h_minus + h_plus))

    xcol = xc[:, None]  # (nx, 1) -> broadcast over y
    psi = drift_y(xcol[..., None], yc[None, :], params)  # (nx, ny)

    for j in range(ny):
        base = flat(ii, j)
        # diffusion up
        if j + 1 < ny:
            rows.append(base); cols.append(flat(ii, j + 1))
            vals.append(np.full(nx, up_rate[j]))
        else:
            kill[base] += up_rate[j]
        # diffusion down
        if j - 1 >= 0:
            rows.append(base); cols.append(flat(ii, j - 1))
            vals.append(np.full(nx, dn_rate[j]))
        else:
            kill[base] += dn_rate[j]
        # drift, upwinded
        pj = psi[:, j]
        up_flux = np.maximum(pj, 0.0) / h_plus[j]
        dn_flux = np.maximum(-pj, 0.0) / h_minus[j]
        if j + 1 < ny:
            rows.append(base); cols.append(flat(ii, j + 1)); vals.append(up_flux)
        else:
            kill[base] += up_flux
        if j - 1 >= 0:
            rows.append(base); cols.append(flat(ii, j - 1)); vals.append(dn_flux)
        else:
            kill[base] += dn_flux

    # --- x transport at speed v toward -L
    t_rate = v / hx
    for j in range(ny):
        base = flat(ii, j)
        inner = ii >= 1
        rows.append(base[inner]); cols.append(flat(ii[inner] - 1, j))
        vals.append(np.full(inner.sum(), t_rate))
        kill[flat(0, j)] += t_rate

    # --- jumps: banded stencil in the x direction, separable in (i, j)
    fy = np.asarray(params.f(yc))  # (ny,)
    band = int(math.ceil(jump_sigmas * params.mutation.tau / hx))
    total_int = np.array([fixation_integral(np.array([x0]), params) for x0 in xc])  # (nx,)
    in_grid = np.zeros(nx)  # accumulated discrete integral per source column
    for di in range(-band, band + 1):
        if di == 0:
            gv0 = params.g(xc[:, None], np.zeros((nx, 1)))
            nu0 = float(params.mutation.density(np.zeros((1, 1)))[0])
            in_grid += gv0 * nu0 * hx  # sub-cell self band, dynamically inert
            continue
        w = np.full((nx, 1), di * hx)
        gnu = params.g(xc[:, None], w) * params.mutation.density(w) * hx  # (nx,)
        tgt = ii + di
        ok = (tgt >= 0) & (tgt < nx)
        in_grid += np.where(ok, gnu, 0.0)
        if not ok.any():
            continue
        src = ii[ok]
        dst = tgt[ok]
        for j in range(ny):
            rate = fy[j] * gnu[ok]
            nz = rate > 0.0
            if not nz.any():
                continue
            rows.append(flat(src[nz], j)); cols.append(flat(dst[nz], j))
            vals.append(rate[nz])
        # off-grid targets jump out of the box
        out = ~ok
        if out.any():
            for j in range(ny):
                kill[flat(ii[out], j)] += fy[j] * gnu[out]

    # jump mass unresolved by the band or the midpoint rule:
    # reconcile rows against the exact quadrature so the total outflow is
    # trapezoid-consistent (routed to kill; it is the beyond-box tail)
    resid = np.maximum(total_int - in_grid, 0.0)
    for j in range(ny):
        kill[flat(ii, j)] += fy[j] * resid

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    dat = np.concatenate(vals)
    Q = sp.coo_matrix((dat, (r, c)), shape=(N, N)).tocsr()
    out_rate = np.asarray(Q.sum(axis=1)).ravel() + kill
    Q = Q - sp.diags(out_rate)
    Q = Q.tocsr()

    # reachability scan on the off-diagonal pattern
    pattern = sp.coo_matrix((np.ones_like(dat), (r, c)), shape=(N, N)).tocsr()
    n_comp, labels = connected_components(pattern, directed=True, connection="strong")
    frac = np.bincount(labels).max() / N
    if frac < scc_min_frac:
        raise NumericError("generator not irreducible on its main component",
                           diagnostics={"n_components": int(n_comp), "largest_frac": float(frac)})

    diag = {"nnz": int(Q.nnz), "bandwidth_x": band, "scc_frac": float(frac),
            "min_row_deficit": float(kill.min()), "max_rate": float(out_rate.max())}
    return GridGenerator(grid=grid, params=params, Q=Q, kill_rate=kill, diagnostics=diag)


def leading_triple(genr: GridGenerator, delta: float = 0.5, tol: float = 1e-10,
                   max_iter: int = 20_000) -> OracleTriple:
    """Leading eigentriple by resolvent power iteration.

    Residual targets: ||alpha Q + lambda alpha||_1 with ||alpha||_1 = 1, and
    ||Q eta + lambda eta||_inf with ||eta||_inf = 1, both below `tol`.
    """
    Q = genr.Q
    N = Q.shape[0]
    K = (sp.identity(N, format="csc") - delta * Q.tocsc())
    lu = splu(K)

    eta = np.ones(N)
    alpha = np.full(N, 1.0 / N)
    lam = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        eta_new = lu.solve(eta)
        eta_new /= np.abs(eta_new).max()
        alpha_new = lu.solve(alpha, trans="T")
        alpha_new = np.maximum(alpha_new, 0.0)
        s = alpha_new.sum()
        if not (s > 0.0) or not np.all(np.isfinite(eta_new)):
            raise NumericError("resolvent iteration degenerated", diagnostics={"iteration": it})
        alpha_new /= s
        eta = np.maximum(eta_new, 0.0)
        alpha = alpha_new
        if it % 5 == 0 or it == max_iter:
            qe = Q @ eta
            lam = -float(eta @ qe) / float(eta @ eta)
            res_eta = float(np.abs(qe + lam * eta).max()) / float(np.abs(eta).max())
            qa = Q.T @ alpha
            lam_a = -float(alpha @ qa) / float(alpha @ alpha)
            res_alpha = float(np.abs(qa + lam_a * alpha).sum())
            if res_eta < tol and res_alpha < tol:
                break
    else:
        raise NumericError("resolvent power iteration did not converge",
                           diagnostics={"iterations": max_iter, "res_eta": res_eta,
                                        "res_alpha": res_alpha})

    lam = 0.5 * (lam + lam_a)
    alpha_grid = genr.vec_to_grid(alpha)
    alpha_meas = EmpiricalMeasure(grid=genr.grid, masses=alpha_grid, n_samples=float("inf"))
    inner = float(alpha @ eta)
    if inner <= 0.0:
        raise NumericError("degenerate alpha-eta pairing")
    eta_grid = genr.vec_to_grid(eta / inner)
    return OracleTriple(lambda0=lam, alpha=alpha_meas, eta=eta_grid,
                        res_alpha=res_alpha, res_eta=res_eta, iterations=it, delta=delta)


# ---------------------------------------------------------------------------
# Crank-Nicolson propagation


class _Propagator:
    """v -> v after n steps of CN for dv/dt = Qv (or the adjoint flow)."""

    def __init__(self, Q: sp.spmatrix, h: float):
        N = Q.shape[0]
        self.h = h
        self.A = (sp.identity(N, format="csr") + 0.5 * h * Q).tocsr()
        self.lu = splu((sp.identity(N, format="csc") - 0.5 * h * Q.tocsc()))

    def forward(self, v: np.ndarray, n: int) -> np.ndarray:
        for _ in range(n):
            v = self.lu.solve(self.A @ v)
        return v

    def adjoint(self, v: np.ndarray, n: int) -> np.ndarray:
        for _ in range(n):
            v = self.A.T @ self.lu.solve(v, trans="T")
        return v


def _step_count(t: float, lam: float, rel_target: float = 5e-7) -> int:
    # CN relative error ~ t lam^3 h^2 / 12
    lam = max(abs(lam), 1e-6)
    h = math.sqrt(12.0 * rel_target / (t * lam**3)) if t > 0 else 1.0
    return max(int(math.ceil(t / min(h, t))), 1)


def survival_consistency(genr: GridGenerator, triple: OracleTriple,
                         ts: tuple[float, ...] = (1.0, 2.0, 5.0)) -> dict[float, float]:
    """Relative error of alpha-started survival against e^{-lambda0 t}."""
    alpha = genr.grid_to_vec(triple.alpha.masses)
    t_max = max(ts)
    n_total = _step_count(t_max, triple.lambda0)
    h = t_max / n_total
    prop = _Propagator(genr.Q, h)
    checkpoints = sorted(ts)
    out = {}
    v = alpha.copy()
    done = 0
    for t in checkpoints:
        n_t = int(round(t / h))
        v = prop.adjoint(v, n_t - done)
        done = n_t
        surv = float(v.sum())
        expected = math.exp(-triple.lambda0 * (h * n_t))
        out[t] = abs(surv - expected) / expected
    return out


@dataclass
class QKernelCheck:
    """Consistency report for the conditioned kernel at horizon t."""

    t: float
    row_sum_max_err: float
    beta_invariance_l1: float
    rows: dict[int, np.ndarray] = field(default_factory=dict)


def oracle_q_kernel(genr: GridGenerator, triple: OracleTriple, t: float,
                    rows: tuple[int, ...] = ()) -> QKernelCheck:
    """Checks of q_t = e^{lambda0 t} eta(end)/eta(start) p_t on the grid.

    Row sums are checked for every cell via one forward evolution of eta;
    beta-invariance via one adjoint evolution of alpha. Explicit kernel rows
    (flat internal indexing) are computed on request via one adjoint
    evolution per row and returned normalized.
    """
    if t <= 0.0:
        raise DomainError("t must be positive")
    lam = triple.lambda0
    eta = genr.grid_to_vec(triple.eta)
    alpha = genr.grid_to_vec(triple.alpha.masses)
    n = _step_count(t, lam)
    h = t / n
    prop = _Propagator(genr.Q, h)
    growth = math.exp(lam * t)

    pe = prop.forward(eta.copy(), n)
    row_sums = growth * pe / np.maximum(eta, 1e-300)
    # row sums are only meaningful where eta is resolvable above round-off
    mask = eta > 1e-9 * eta.max()
    row_err = float(np.abs(row_sums[mask] - 1.0).max())

    ap = prop.adjoint(alpha.copy(), n)
    beta = alpha * eta
    beta_t = growth * eta * ap
    inv_err = float(np.abs(beta_t - beta).sum())

    out_rows = {}
    for i in rows:
        e = np.zeros(genr.n_cells)
        e[i] = 1.0
        p_row = prop.adjoint(e, n)
        q_row = growth * p_row * eta / max(eta[i], 1e-300)
        out_rows[i] = q_row / max(q_row.sum(), 1e-300)
    return QKernelCheck(t=t, row_sum_max_err=row_err, beta_invariance_l1=inv_err, rows=out_rows)
