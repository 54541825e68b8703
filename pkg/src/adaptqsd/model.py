"""Model specification for the coupled mutation-lag / population-size process.

The state is (x, y): x in R^d is the phenotypic lag behind an optimum moving
at speed v along the first axis, y > 0 a transformed population size
(y = (2/sigma) sqrt(n) for raw size n). Between jumps x declines
deterministically at rate v in the first coordinate and y diffuses with unit
Brownian noise and drift

    drift_y(x, y) = -1/(2 y) + r(x) y / 2 - gamma y**3,
    gamma = gamma_n * sigma**2 / 8.

Mutations of effect w arrive from a Poisson proposal stream with intensity
measure f(y) nu(dw) and fix with probability g(x, w); an accepted mutation
translates x by w instantly. Extinction is absorption of y at 0.

Everything here is pure parameterization and pointwise evaluation; path
dynamics live in pathsim, ensembles in qsd, and the grid cross-check in
oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import expit
from scipy.stats import norm as _norm

from .errors import DomainError, NumericError, UnsupportedModelError

__all__ = [
    "GrowthSpec",
    "ArrivalSpec",
    "FixationSpec",
    "MutationSpec",
    "ModelParams",
    "State",
    "ReferenceBox",
    "HypothesisCheck",
    "HypothesisReport",
    "n_to_y",
    "y_to_n",
    "drift_y",
    "drift_y_envelope",
    "jump_intensity",
    "fixation_integral",
    "rescale_jump_measure",
    "validate_hypotheses",
    "reference_set",
    "y_equilibrium",
    "default_params",
]


# ---------------------------------------------------------------------------
# component families


@dataclass(frozen=True)
class GrowthSpec:
    """Per-capita growth rate as a function of the lag x.

    QUADRATIC family: r(x) = r0 - a * ||x||^2. a >= 0; a > 0 is what drives
    growth to -infinity for large lags (checked by the hypothesis validator,
    not the constructor, so degenerate test models stay constructible).
    """

    family: str = "quadratic"
    r0: float = 2.0
    a: float = 0.5

    def __post_init__(self):
        if self.family != "quadratic":
            raise UnsupportedModelError(f"unknown growth family {self.family!r}")
        if not np.isfinite(self.r0):
            raise DomainError("r0 must be finite")
        if not (self.a >= 0.0):
            raise DomainError("a must be >= 0")

    def rate(self, x: np.ndarray) -> np.ndarray:
        """r(x) for x of shape (..., d); returns shape (...)."""
        x = np.asarray(x, dtype=float)
        return self.r0 - self.a * np.sum(np.square(x), axis=-1)

    @property
    def r_sup(self) -> float:
        """Supremum of r over R^d (attained at x = 0 for a >= 0)."""
        return self.r0


@dataclass(frozen=True)
class ArrivalSpec:
    """Mutation proposal rate as a function of raw population size n.

    LINEAR-IN-N family: f_n(n) = mu * n, so in y-coordinates
    f(y) = mu * sigma^2 y^2 / 4 (assembled by ModelParams.f).
    """

    family: str = "linear_in_n"
    mu: float = 1.0

    def __post_init__(self):
        if self.family != "linear_in_n":
            raise UnsupportedModelError(f"unknown arrival family {self.family!r}")
        if not (self.mu > 0.0) or not np.isfinite(self.mu):
            raise DomainError("mu must be positive and finite")

    def rate_n(self, n: np.ndarray) -> np.ndarray:
        return self.mu * np.asarray(n, dtype=float)


@dataclass(frozen=True)
class FixationSpec:
    """Fixation probability g(x, w) of a proposed mutation w at lag x.

    Families:

    - "deleterious_ok": g = g_max * logistic(s * [r(x+w) - r(x)]). Strictly
      positive everywhere (deleterious mutations can fix).
    - "advantageous_only": g = g_max * (1 - exp(-s * [r(x+w) - r(x)])) on
      ||x + w|| < ||x||, else 0. Jumps can only shrink the lag norm.
    - "rescaled_advantageous": the advantageous-only g divided by
      (||w|| wedge 1); the companion of the size-tilted mutation family
      produced by rescale_jump_measure. May exceed g_max for small |w| but
      stays bounded on compacts (see bound()).
    """

    family: str = "deleterious_ok"
    g_max: float = 1.0
    s: float = 1.0

    _FAMILIES = ("deleterious_ok", "advantageous_only", "rescaled_advantageous")

    def __post_init__(self):
        if self.family not in self._FAMILIES:
            raise UnsupportedModelError(f"unknown fixation family {self.family!r}")
        if not (self.g_max > 0.0) or not np.isfinite(self.g_max):
            raise DomainError("g_max must be positive and finite")
        if not (self.s >= 0.0) or not np.isfinite(self.s):
            raise DomainError("s must be >= 0 and finite")

    @property
    def advantageous(self) -> bool:
        return self.family in ("advantageous_only", "rescaled_advantageous")

    def probability(self, x: np.ndarray, w: np.ndarray, growth: GrowthSpec) -> np.ndarray:
        """g(x, w), broadcast over leading dimensions of x and w."""
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        dr = growth.rate(x + w) - growth.rate(x)
        if self.family == "deleterious_ok":
            return self.g_max * expit(self.s * dr)
        inward = np.sum(np.square(x + w), axis=-1) < np.sum(np.square(x), axis=-1)
        base = self.g_max * np.maximum(-np.expm1(-self.s * dr), 0.0)
        g = np.where(inward, base, 0.0)
        if self.family == "advantageous_only":
            return g
        # rescaled: divide by (||w|| wedge 1); g vanishes at w = 0 so the
        # clipped denominator never creates mass from nothing
        wn = np.sqrt(np.sum(np.square(w), axis=-1))
        return g / np.maximum(np.minimum(wn, 1.0), 1e-300)

    def bound(self, x_norm: float, growth: GrowthSpec) -> float:
        """Upper bound for sup_w g(x, w) over ||x|| <= x_norm."""
        if self.family != "rescaled_advantageous":
            return self.g_max
        # for |w| >= 1 the factor is 1; for |w| < 1,
        # (1 - exp(-s dr))/|w| <= s*dr/|w| <= s*a*(2||x|| + |w|) <= s*a*(2||x|| + 1)
        return self.g_max * max(1.0, self.s * growth.a * (2.0 * x_norm + 1.0))


@dataclass(frozen=True)
class MutationSpec:
    """Finite mutation measure nu on mutation effects w in R^d.

    - "gaussian": nu = m_nu * N(0, tau^2 I_d); total mass m_nu.
    - "gaussian_size_tilted": nu = m_nu * (||w|| wedge 1) * N(0, tau^2 I_d) dw,
      the output measure of rescale_jump_measure. m_nu is the coefficient of
      the un-tilted Gaussian; the total mass is m_nu * E[||W|| wedge 1].
    """

    family: str = "gaussian"
    m_nu: float = 1.0
    tau: float = 0.5

    _FAMILIES = ("gaussian", "gaussian_size_tilted")

    def __post_init__(self):
        if self.family not in self._FAMILIES:
            raise UnsupportedModelError(f"unknown mutation family {self.family!r}")
        # m_nu = 0 is the mutation-free degenerate model: no proposals ever
        # fire, so it stays simulable even though the uniqueness hypotheses
        # fail (diagnostics use it as the zero-flux control)
        if not (self.m_nu >= 0.0) or not np.isfinite(self.m_nu):
            raise DomainError("m_nu must be >= 0 and finite")
        if not (self.tau > 0.0) or not np.isfinite(self.tau):
            raise DomainError("tau must be positive and finite")

    def gauss_pdf(self, w: np.ndarray) -> np.ndarray:
        """Density of N(0, tau^2 I_d) at w of shape (..., d)."""
        w = np.asarray(w, dtype=float)
        d = w.shape[-1]
        q = np.sum(np.square(w), axis=-1) / (2.0 * self.tau**2)
        return (2.0 * math.pi * self.tau**2) ** (-d / 2.0) * np.exp(-q)

    def density(self, w: np.ndarray) -> np.ndarray:
        """Lebesgue density of nu at w (mass-weighted, not normalized)."""
        base = self.m_nu * self.gauss_pdf(w)
        if self.family == "gaussian":
            return base
        wn = np.sqrt(np.sum(np.square(np.asarray(w, dtype=float)), axis=-1))
        return base * np.minimum(wn, 1.0)

    def total_mass(self, dim: int) -> float:
        """nu(R^d)."""
        if self.family == "gaussian":
            return self.m_nu
        if dim == 1:
            t = self.tau
            pdf0 = 1.0 / (t * math.sqrt(2.0 * math.pi))
            pdf1 = pdf0 * math.exp(-1.0 / (2.0 * t * t))
            expectation = 2.0 * t * t * (pdf0 - pdf1) + 2.0 * _norm.sf(1.0 / t)
            return self.m_nu * expectation
        nodes, weights = _gh_grid(64, dim)
        wn = np.sqrt(np.sum(np.square(nodes * self.tau * math.sqrt(2.0)), axis=-1))
        return self.m_nu * float(np.sum(weights * np.minimum(wn, 1.0)))

    def density_sup(self, dim: int) -> float:
        """Analytic sup of the Lebesgue density of nu."""
        peak = self.m_nu * (2.0 * math.pi * self.tau**2) ** (-dim / 2.0)
        if self.family == "gaussian":
            return peak
        # tilt factor <= 1; crude but valid bound
        return peak

    def sample(self, gen: np.random.Generator, size: int, dim: int) -> np.ndarray:
        """Draw `size` effects from the normalized law nu / nu(R^d)."""
        if self.family == "gaussian":
            return gen.normal(0.0, self.tau, size=(size, dim))
        out = np.empty((size, dim))
        filled = 0
        while filled < size:
            batch = max(size - filled, 64)
            cand = gen.normal(0.0, self.tau, size=(batch * 2, dim))
            accept_p = np.minimum(np.sqrt(np.sum(np.square(cand), axis=-1)), 1.0)
            keep = cand[gen.random(batch * 2) < accept_p]
            take = min(len(keep), size - filled)
            out[filled : filled + take] = keep[:take]
            filled += take
        return out


# ---------------------------------------------------------------------------
# assembled parameter set and state


@dataclass(frozen=True)
class ModelParams:
    """Complete, immutable model parameterization."""

    dim: int = 1
    v: float = 0.2
    sigma: float = 1.0
    gamma_n: float = 0.1
    growth: GrowthSpec = field(default_factory=GrowthSpec)
    arrival: ArrivalSpec = field(default_factory=ArrivalSpec)
    fixation: FixationSpec = field(default_factory=FixationSpec)
    mutation: MutationSpec = field(default_factory=MutationSpec)

    def __post_init__(self):
        if not (1 <= self.dim <= 3):
            raise DomainError("dim must be 1, 2 or 3")
        for name in ("v", "sigma", "gamma_n"):
            val = getattr(self, name)
            if not (val > 0.0) or not np.isfinite(val):
                raise DomainError(f"{name} must be positive and finite")

    @property
    def gamma(self) -> float:
        """Cubic damping coefficient; always gamma_n * sigma^2 / 8."""
        return self.gamma_n * self.sigma**2 / 8.0

    def r(self, x: np.ndarray) -> np.ndarray:
        return self.growth.rate(x)

    def f(self, y) -> np.ndarray:
        """Proposal-rate factor in y-coordinates: f(y) = f_n(sigma^2 y^2 / 4)."""
        y = np.asarray(y, dtype=float)
        return self.arrival.rate_n(y_to_n(y, self.sigma))

    def g(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        return self.fixation.probability(x, w, self.growth)

    def mutation_mass(self) -> float:
        return self.mutation.total_mass(self.dim)

    def g_bound(self, x_norm: float) -> float:
        return self.fixation.bound(x_norm, self.growth)

    def g_bound_vec(self, x_norms: np.ndarray) -> np.ndarray:
        x_norms = np.asarray(x_norms, dtype=float)
        if self.fixation.family != "rescaled_advantageous":
            return np.full_like(x_norms, self.fixation.g_max)
        factor = self.fixation.s * self.growth.a * (2.0 * x_norms + 1.0)
        return self.fixation.g_max * np.maximum(1.0, factor)

    def thinning_bound(self, y, x_norm: float = 0.0) -> np.ndarray:
        """f(y) * sup_g * nu(R^d): exact proposal-rate ceiling at (x, y)."""
        return self.f(y) * self.g_bound(x_norm) * self.mutation_mass()


@dataclass
class State:
    """Point state of the process; (x, y) = (0, 0) with absorbed=True after extinction."""

    x: np.ndarray
    y: float
    absorbed: bool = False

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float)).copy()
        self.y = float(self.y)
        if not self.absorbed and self.y <= 0.0:
            raise DomainError("y must be positive for a live state")

    @classmethod
    def absorbed_state(cls, dim: int) -> "State":
        return cls(x=np.zeros(dim), y=0.0, absorbed=True)


# ---------------------------------------------------------------------------
# coordinate maps and drift


def n_to_y(n, sigma: float):
    """Transform raw population size n >= 0 to y = (2/sigma) sqrt(n)."""
    n = np.asarray(n, dtype=float)
    if np.any(n < 0.0):
        raise DomainError("population size must be >= 0")
    if not (sigma > 0.0):
        raise DomainError("sigma must be positive")
    return (2.0 / sigma) * np.sqrt(n)


def y_to_n(y, sigma: float):
    """Inverse of n_to_y: n = sigma^2 y^2 / 4."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0.0):
        raise DomainError("y must be >= 0")
    return sigma**2 * np.square(y) / 4.0


def drift_y(x, y, params: ModelParams):
    """Drift of the y coordinate: -1/(2y) + r(x) y/2 - gamma y^3.

    x has shape (..., d) and y shape (...) (broadcastable). y must be
    strictly positive.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise DomainError("drift_y requires y > 0")
    r = params.r(x)
    return -0.5 / y + 0.5 * r * y - params.gamma * y**3


def drift_y_envelope(y, params: ModelParams):
    """Comparison drift with r frozen at its supremum; dominates drift_y."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise DomainError("drift_y_envelope requires y > 0")
    return -0.5 / y + 0.5 * params.growth.r_sup * y - params.gamma * y**3


def y_equilibrium(r_value: float, gamma: float) -> float | None:
    """Largest stationary point of the frozen-r drift, None if none exists.

    Solves r y/2 - gamma y^3 - 1/(2y) = 0, i.e. 2 gamma u^2 - r u + 1 = 0
    for u = y^2.
    """
    if gamma <= 0.0:
        return math.sqrt(1.0 / r_value) if r_value > 0.0 else None
    disc = r_value**2 - 8.0 * gamma
    if r_value <= 0.0 or disc < 0.0:
        return None
    u_plus = (r_value + math.sqrt(disc)) / (4.0 * gamma)
    return math.sqrt(u_plus)


# ---------------------------------------------------------------------------
# quadrature over the mutation measure


@lru_cache(maxsize=32)
def _gh_grid(order: int, dim: int):
    """Tensor Gauss-Hermite nodes/weights for E over N(0, I_d/2)-style kernels.

    Returns (nodes (n, dim), weights (n,)) with weights normalized so that
    sum(weights * h(sqrt(2) tau nodes)) = E[h(W)] for W ~ N(0, tau^2 I_d).
    """
    t, w = np.polynomial.hermite.hermgauss(order)
    w = w / math.sqrt(math.pi)
    grids = np.meshgrid(*([t] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(
        np.stack([g.ravel() for g in np.meshgrid(*([w] * dim), indexing="ij")]), axis=0
    )
    return nodes, weights


@lru_cache(maxsize=8)
def _gl_nodes(order: int):
    return np.polynomial.legendre.leggauss(order)


def _integral_once(x: np.ndarray, params: ModelParams, order: int, weight: str) -> float:
    """One quadrature pass of integral of weight(w) g(x, w) nu(dw)."""
    mut = params.mutation
    tau = mut.tau
    d = params.dim

    if params.fixation.advantageous and d == 1:
        # g vanishes outside the open interval between 0 and -2x and at both
        # endpoints, so Gauss-Legendre on that interval is accurate and the
        # Gaussian indicator discontinuity never enters.
        x0 = float(np.asarray(x).reshape(-1)[0])
        lo, hi = sorted((0.0, -2.0 * x0))
        lo, hi = max(lo, -12.0 * tau), min(hi, 12.0 * tau)
        if hi <= lo:
            return 0.0
        t, wt = _gl_nodes(order)
        wv = 0.5 * (hi - lo) * t + 0.5 * (hi + lo)
        wcol = wv[:, None]
        vals = params.g(np.asarray(x, dtype=float), wcol) * mut.density(wcol)
        if weight == "w1":
            vals = vals * wv
        return 0.5 * (hi - lo) * float(np.sum(wt * vals))

    nodes, wts = _gh_grid(order, d)
    wv = math.sqrt(2.0) * tau * nodes
    vals = params.g(np.asarray(x, dtype=float), wv)
    if mut.family == "gaussian_size_tilted":
        vals = vals * np.minimum(np.sqrt(np.sum(np.square(wv), axis=-1)), 1.0)
    if weight == "w1":
        vals = vals * wv[..., 0]
    return mut.m_nu * float(np.sum(wts * vals))


def fixation_integral(x, params: ModelParams, order: int = 64, weight: str = "one") -> float:
    """integral of weight(w) * g(x, w) nu(dw) with convergence check.

    weight: "one" for the acceptance rate factor, "w1" for the first-component
    displacement moment (flux integrand). Raises NumericError when halving the
    order moves the value by more than the family's tolerance.
    """
    if weight not in ("one", "w1"):
        raise DomainError(f"unknown weight {weight!r}")
    if params.mutation.m_nu == 0.0:
        return 0.0
    full = _integral_once(x, params, order, weight)
    half = _integral_once(x, params, max(order // 2, 8), weight)
    scale = params.fixation.g_max * params.mutation_mass() * (1.0 + params.mutation.tau)
    tol = 1e-6 if (params.dim == 1 or not params.fixation.advantageous) else 1e-2
    err = abs(full - half) / max(abs(full), abs(half), 1e-9 * scale)
    if err > max(tol, 1e-3) and abs(full - half) > 1e-12 * scale:
        raise NumericError(
            "mutation-measure quadrature did not converge",
            diagnostics={"order": order, "value": full, "half_order_value": half, "rel_change": err},
        )
    return full


def jump_intensity(x, y, params: ModelParams, order: int = 64) -> tuple[float, float]:
    """Total accepted-jump rate at (x, y) and the thinning proposal bound.

    Returns (total, bound) with
        total = f(y) * integral g(x, w) nu(dw),
        bound = f(y) * sup_g * nu(R^d) >= total.
    """
    y = float(np.asarray(y, dtype=float))
    if y < 0.0:
        raise DomainError("jump_intensity requires y >= 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    fy = float(params.f(y))
    total = fy * fixation_integral(x, params, order=order, weight="one")
    bound = fy * params.g_bound(float(np.linalg.norm(x))) * params.mutation_mass()
    return total, bound


# ---------------------------------------------------------------------------
# small-jump rescaling


def rescale_jump_measure(params: ModelParams) -> ModelParams:
    """Equivalent model with size-tilted mutation measure and rescaled fixation.

    Sends (g, nu) to (g/(|w| wedge 1), (|w| wedge 1) nu). The product g*nu,
    hence every accepted-jump law and rate, is unchanged pointwise; the new
    measure stays finite because the tilt integrates the |w| wedge 1 moment.
    Only defined for the advantageous-only family in d = 1.
    """
    if params.fixation.family != "advantageous_only":
        raise UnsupportedModelError("rescaling is defined for the advantageous_only family")
    if params.mutation.family != "gaussian":
        raise UnsupportedModelError("rescaling expects the plain gaussian mutation family")
    if params.dim != 1:
        raise UnsupportedModelError("rescaling implemented for d = 1")
    return replace(
        params,
        fixation=replace(params.fixation, family="rescaled_advantageous"),
        mutation=replace(params.mutation, family="gaussian_size_tilted"),
    )


# ---------------------------------------------------------------------------
# reference set


@dataclass(frozen=True)
class ReferenceBox:
    """Product set B(center, radius) x [y_lo, y_hi] used as a return anchor."""

    center: np.ndarray
    radius: float
    y_lo: float
    y_hi: float

    def sample(self, gen: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draws: (x (size, d), y (size,))."""
        d = len(self.center)
        direction = gen.normal(size=(size, d))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
        radii = self.radius * gen.random(size) ** (1.0 / d)
        x = self.center + direction * radii[:, None]
        y = gen.uniform(self.y_lo, self.y_hi, size)
        return x, y

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside_ball = np.linalg.norm(x - self.center, axis=-1) <= self.radius
        return inside_ball & (np.asarray(y) >= self.y_lo) & (np.asarray(y) <= self.y_hi)


def reference_set(params: ModelParams) -> ReferenceBox:
    """Canonical small product set in the bulk: ball of radius tau/2 at
    -tau e_1, crossed with y in [1/2, 2]."""
    center = np.zeros(params.dim)
    center[0] = -params.mutation.tau
    return ReferenceBox(center=center, radius=params.mutation.tau / 2.0, y_lo=0.5, y_hi=2.0)


# ---------------------------------------------------------------------------
# hypothesis validation


@dataclass(frozen=True)
class HypothesisCheck:
    code: str
    status: str  # "satisfied" | "violated" | "not_applicable"
    detail: str

    @property
    def ok(self) -> bool:
        return self.status != "violated"


@dataclass
class HypothesisReport:
    """Status of the structural hypotheses H1-H11 for one parameter set."""

    checks: dict[str, HypothesisCheck]
    dim: int
    fixation_family: str

    _DESCRIPTIONS = {
        "H1": "arrival rate continuous in the size variable",
        "H2": "growth rate locally Lipschitz",
        "H3": "fixation probability bounded on compacts",
        "H4": "mutation measure finite",
        "H5": "arrival rate positive for positive size",
        "H6": "mutation density bounded below on an annulus",
        "H7": "growth decays to -infinity along some ray",
        "H8": "fixation probability strictly positive",
        "H9": "advantageous-only jump structure",
        "H10": "mutation measure has a bounded density",
        "H11": "normalized jump-density ratio uniformly bounded",
    }

    def status(self, code: str) -> str:
        return self.checks[code].status

    def required_codes(self) -> list[str]:
        req = ["H1", "H2", "H3", "H4", "H5", "H6", "H7"]
        # positivity (H8) or sign structure (H9): whichever the family targets
        req.append("H9" if self.fixation_family in ("advantageous_only", "rescaled_advantageous") else "H8")
        if self.dim >= 2:
            req.append("H11")
        return req

    def routing_ok(self) -> tuple[bool, list[str]]:
        """Whether the main existence/convergence guarantees are in force."""
        missing = [c for c in self.required_codes() if self.checks[c].status != "satisfied"]
        return (not missing, missing)

    def lines(self) -> list[str]:
        out = []
        required = set(self.required_codes())
        for code in sorted(self.checks, key=lambda c: int(c[1:])):
            chk = self.checks[code]
            tag = "required" if code in required else "informational"
            out.append(f"{code:4s} [{chk.status:>14s}] ({tag}) {self._DESCRIPTIONS[code]}: {chk.detail}")
        ok, missing = self.routing_ok()
        out.append("overall: " + ("all required hypotheses satisfied" if ok else f"missing {', '.join(missing)}"))
        return out

    def __str__(self) -> str:
        return "\n".join(self.lines())


def _characteristic_scale(params: ModelParams) -> float:
    scale = max(params.mutation.tau, 1.0)
    if params.growth.a > 0.0:
        scale = max(scale, math.sqrt(max(params.growth.r0, 1.0) / params.growth.a))
    return scale


def validate_hypotheses(params: ModelParams, n_grid: int = 10_000, seed: int = 0) -> HypothesisReport:
    """Check the structural hypotheses; analytic per family where possible,
    grid-sampled in a box of half-width 4x the characteristic scale otherwise.

    Never raises: numeric trouble inside a check is reported as a violation
    with the error message as detail.
    """
    gen = np.random.default_rng(seed)
    half = 4.0 * _characteristic_scale(params)
    d = params.dim
    xs = gen.uniform(-half, half, size=(n_grid, d))
    ws = gen.uniform(-half, half, size=(n_grid, d))
    checks: dict[str, HypothesisCheck] = {}

    def record(code, status, detail):
        checks[code] = HypothesisCheck(code=code, status=status, detail=detail)

    def guarded(code, fn):
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - validator must not throw
            record(code, "violated", f"check failed numerically: {exc}")

    def h1():
        ys = np.linspace(1e-6, 4.0 * half, 256)
        vals = params.f(ys)
        if np.all(np.isfinite(vals)):
            record("H1", "satisfied", "linear-in-n family is continuous; finite on test grid")
        else:
            record("H1", "violated", "non-finite arrival rate on test grid")

    def h2():
        record("H2", "satisfied", "quadratic growth is smooth, hence locally Lipschitz")

    def h3():
        bound = params.g_bound(float(np.max(np.linalg.norm(xs, axis=1))))
        vals = params.g(xs, ws)
        mx = float(np.max(vals))
        if np.all(np.isfinite(vals)) and mx <= bound * (1.0 + 1e-9):
            record("H3", "satisfied", f"grid sup {mx:.4g} <= analytic bound {bound:.4g}")
        else:
            record("H3", "violated", f"grid sup {mx:.4g} exceeds bound {bound:.4g}")

    def h4():
        mass = params.mutation_mass()
        nodes, wts = _gh_grid(64, d)
        total = float(np.sum(wts))  # normalized Gaussian integrates to 1
        if mass > 0.0 and np.isfinite(mass) and abs(total - 1.0) < 1e-8:
            record("H4", "satisfied", f"total mass {mass:.6g}; base density integrates to 1 within 1e-8")
        else:
            record("H4", "violated", f"mass {mass} or normalization {total} off")

    def h5():
        ys = np.geomspace(1e-6, 4.0 * half, 256)
        if np.all(params.f(ys) > 0.0):
            record("H5", "satisfied", f"f > 0 for y > 0 (mu = {params.arrival.mu:g})")
        else:
            record("H5", "violated", "arrival rate vanishes at positive size")

    def h6():
        s_rad = params.mutation.tau
        delta = s_rad / 2.0
        probe = np.zeros((2, d))
        probe[0, 0] = s_rad - delta
        probe[1, 0] = s_rad + delta
        nu_min = float(np.min(params.mutation.density(probe)))
        if nu_min > 0.0:
            record("H6", "satisfied", f"density >= {nu_min:.4g} on annulus radius {s_rad:g} +/- {delta:g}")
        else:
            record("H6", "violated", "mutation density vanishes on the reference annulus")

    def h7():
        if params.growth.a > 0.0:
            record("H7", "satisfied", f"r(R e1) = {params.growth.r0:g} - {params.growth.a:g} R^2 -> -inf")
        else:
            record("H7", "violated", "a = 0: growth does not decay along any ray")

    def h8():
        if params.fixation.family == "deleterious_ok":
            mn = float(np.min(params.g(xs, ws)))
            if mn > 0.0:
                record("H8", "satisfied", f"logistic fixation strictly positive (grid min {mn:.3g})")
            else:
                record("H8", "violated", "fixation probability hit zero on grid")
        else:
            record("H8", "violated", "advantageous-only family vanishes on outward mutations")

    def h9():
        if params.fixation.advantageous:
            outward = np.sum(np.square(xs + ws), axis=-1) >= np.sum(np.square(xs), axis=-1)
            bad = int(np.count_nonzero(params.g(xs, ws)[outward] != 0.0))
            if bad == 0:
                record("H9", "satisfied", f"g == 0 on all {int(outward.sum())} outward grid pairs")
            else:
                record("H9", "violated", f"{bad} outward pairs with positive fixation probability")
        else:
            record("H9", "violated", "deleterious-ok family accepts outward mutations")

    def h10():
        sup = params.mutation.density_sup(d)
        record("H10", "satisfied", f"Lebesgue density bounded by {sup:.4g} (alternative route to H9 only)")

    def h11():
        if d == 1:
            record("H11", "not_applicable", "only constrains d >= 2")
            return
        # the controlling quantity is the local density ratio near the
        # reference annulus; sample there instead of the full box
        s_rad = params.mutation.tau
        shell = ws[np.abs(np.linalg.norm(ws, axis=1) - s_rad) < s_rad]
        if len(shell) == 0:
            record("H11", "satisfied", "no shell samples; Gaussian ratio bounded analytically")
            return
        local = params.mutation.density(shell)
        sup_ratio = float(np.max(local) / np.min(local))
        if np.isfinite(sup_ratio):
            record("H11", "satisfied", f"shell density ratio sup {sup_ratio:.4g} (finite)")
        else:
            record("H11", "violated", "unbounded density ratio near reference shell")

    for code, fn in [("H1", h1), ("H2", h2), ("H3", h3), ("H4", h4), ("H5", h5), ("H6", h6),
                     ("H7", h7), ("H8", h8), ("H9", h9), ("H10", h10), ("H11", h11)]:
        guarded(code, fn)

    return HypothesisReport(checks=checks, dim=d, fixation_family=params.fixation.family)


# ---------------------------------------------------------------------------
# convenience constructor


def default_params(**overrides) -> ModelParams:
    """Reference parameter set used by the shipped config and most tests.

    Accepts flat overrides for the scalar fields of every component spec,
    e.g. default_params(r0=4.0, v=0.1, fixation_family="advantageous_only").
    """
    growth = GrowthSpec(r0=overrides.pop("r0", 2.0), a=overrides.pop("a", 0.5))
    arrival = ArrivalSpec(mu=overrides.pop("mu", 1.0))
    fixation = FixationSpec(
        family=overrides.pop("fixation_family", "deleterious_ok"),
        g_max=overrides.pop("g_max", 1.0),
        s=overrides.pop("s", 2.0),
    )
    mutation = MutationSpec(
        family=overrides.pop("mutation_family", "gaussian"),
        m_nu=overrides.pop("m_nu", 1.0),
        tau=overrides.pop("tau", 0.5),
    )
    params = ModelParams(
        dim=overrides.pop("dim", 1),
        v=overrides.pop("v", 0.2),
        sigma=overrides.pop("sigma", 1.0),
        gamma_n=overrides.pop("gamma_n", 0.1),
        growth=growth,
        arrival=arrival,
        fixation=fixation,
        mutation=mutation,
    )
    if overrides:
        raise DomainError(f"unknown parameter overrides: {sorted(overrides)}")
    return params
