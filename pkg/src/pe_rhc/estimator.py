"""Ridge identification, confidence sets and the interval-boundary estimate selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .costs import StageCostSpec, TerminalCostSpec
from .linsys import ContractError, SystemParams, spectral_radius, uniform_ball
from .rhc import HorizonProblem, PolytopeU, RHCSolver, SolverError, first_input, shift_warm

log = logging.getLogger(__name__)

GAMMA_Y_FLOOR = 1e-6
GRAM_TOL = 1e-10
STABLE_SCALE = 0.999


class DataLog:
    """Append-only record of observations ``y_k`` and applied inputs ``u_k``."""

    def __init__(self, n: int, m: int, capacity: int = 1024):
        self.n, self.m = n, m
        self._y = np.empty((capacity, n))
        self._u = np.empty((capacity, m))
        self.ny = 0
        self.nu = 0

    def _grow(self):
        cap = 2 * self._y.shape[0]
        y, u = np.empty((cap, self.n)), np.empty((cap, self.m))
        y[: self.ny], u[: self.nu] = self._y[: self.ny], self._u[: self.nu]
        self._y, self._u = y, u

    def add_observation(self, y):
        if self.ny != self.nu:
            raise ContractError("an input must be logged before the next observation")
        if self.ny == self._y.shape[0]:
            self._grow()
        self._y[self.ny] = np.asarray(y, dtype=float).reshape(self.n)
        self.ny += 1

    def add_input(self, u):
        if self.nu != self.ny - 1:
            raise ContractError("an observation must precede each input")
        self._u[self.nu] = np.asarray(u, dtype=float).reshape(self.m)
        self.nu += 1

    @property
    def y(self) -> np.ndarray:
        return self._y[: self.ny]

    @property
    def u(self) -> np.ndarray:
        return self._u[: self.nu]

    def regression(self, upto: int | None = None, exclude=()) -> tuple[np.ndarray, np.ndarray]:
        """Regressors ``z_k = [y_k; u_k]`` and targets ``y_{k+1}`` for ``k = 1..upto``."""
        avail = min(self.nu, self.ny - 1)
        k_max = avail if upto is None else min(upto, avail)
        Z = np.hstack([self._y[:k_max], self._u[:k_max]])
        Y = self._y[1:k_max + 1]
        if len(exclude):
            keep = np.ones(k_max, dtype=bool)
            idx = np.asarray([k - 1 for k in exclude if 1 <= k <= k_max], dtype=int)
            keep[idx] = False
            Z, Y = Z[keep], Y[keep]
        return Z, Y


def ridge_fit_arrays(Z: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    """``theta`` (n x (n+m)) minimizing ``||Y - Z theta'||^2 + lam ||theta||_F^2``."""
    if lam < 0:
        raise ContractError("lambda must be nonnegative")
    d = Z.shape[1]
    if lam == 0.0:
        sv = np.linalg.svd(Z, compute_uv=False) if len(Z) else np.zeros(1)
        if len(Z) < d or sv[-1] ** 2 <= GRAM_TOL:
            raise ContractError("regressor Gram matrix is singular; excitation is insufficient")
        Za, Ya = Z, Y
    else:
        Za = np.vstack([Z, np.sqrt(lam) * np.eye(d)])
        Ya = np.vstack([Y, np.zeros((d, Y.shape[1]))])
    sol, *_ = np.linalg.lstsq(Za, Ya, rcond=None)
    return sol.T


def ridge_fit(data: DataLog, lam: float, upto: int | None = None, exclude=()) -> np.ndarray:
    Z, Y = data.regression(upto, exclude)
    return ridge_fit_arrays(Z, Y, lam)


def log_term(n: int, m: int, delta_tilde: float) -> float:
    return (n + m) * np.log(np.sqrt(2.0)) - np.log(delta_tilde)


def confidence_radius(n, m, S, R, gamma, c_p_i, t_i, lam, gamma_y, delta_tilde) -> tuple[float, float]:
    """``(R_tilde, beta_i)`` for the Frobenius confidence ball."""
    if not 0.0 < delta_tilde < 1.0:
        raise ContractError("delta_tilde must lie in (0, 1)")
    if gamma_y <= 0:
        raise ContractError("gamma_y must be positive")
    if min(gamma, c_p_i, t_i) <= 0 or R < 0 or lam < 0:
        raise ContractError("confidence_radius arguments must be positive")
    R_tilde = 2.0 * n * (n + 1) * max(1.0, S) * R * np.sqrt(log_term(n, m, delta_tilde))
    beta = R_tilde / np.sqrt(gamma * c_p_i * t_i) + lam * S / gamma_y
    return float(R_tilde), float(beta)


def gamma_y_formula(gamma, n, m, R, H, delta_tilde) -> float:
    if H < 1:
        raise ContractError("H must be at least 1")
    val = gamma * (1.0 - (2.0 * n * R / np.sqrt(gamma * np.sqrt(H))) * np.sqrt(4.0 * log_term(n, m, delta_tilde)))
    if val <= 0:
        log.warning("gamma_y formula is nonpositive (%.3g) at H=%s; clamping to %.0e", val, H, GAMMA_Y_FLOOR)
        return GAMMA_Y_FLOOR
    return float(val)


@dataclass(frozen=True, eq=False)
class ConfidenceSet:
    center: np.ndarray
    radius: float
    S: float
    R_tilde: float = 0.0
    gamma_y: float = 1.0

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.center, dtype=float))
        if c.shape[1] <= c.shape[0]:
            raise ContractError("center must be n x (n+m)")
        if self.radius < 0:
            raise ContractError("radius must be nonnegative")
        object.__setattr__(self, "center", c)

    @property
    def n(self) -> int:
        return self.center.shape[0]

    @classmethod
    def prior(cls, n: int, m: int, S: float) -> "ConfidenceSet":
        """The whole admissible set: the ball of radius ``S`` around zero."""
        if not np.isfinite(S):
            raise ContractError("the admissible set needs a finite bound S")
        return cls(np.zeros((n, n + m)), S, S)

    def contains(self, theta, tol: float = 1e-12) -> bool:
        th = theta.theta if isinstance(theta, SystemParams) else np.asarray(theta, dtype=float)
        return bool(np.linalg.norm(th - self.center) <= self.radius + tol and np.linalg.norm(th) <= self.S + tol)


def project_to_theta(theta, n: int, S: float) -> np.ndarray:
    """Pull a parameter matrix into the admissible set: norm first, then stability."""
    th = np.array(theta, dtype=float)
    nrm = np.linalg.norm(th)
    if nrm > S:
        th *= S / nrm
    rho = spectral_radius(th[:, :n])
    if rho >= 1.0:
        th[:, :n] *= STABLE_SCALE / rho
    return th


def admissible(theta, n: int, S: float) -> bool:
    return np.linalg.norm(theta) <= S and spectral_radius(theta[:, :n]) < 1.0


@dataclass(frozen=True, eq=False)
class EstimateResult:
    theta_hat: SystemParams
    x_hat: np.ndarray
    n_candidates: int
    best_cost: float
    center: np.ndarray


@dataclass
class SelectionContext:
    """What the candidate simulation needs to evaluate the receding-horizon policy."""

    costs: StageCostSpec
    terminal: TerminalCostSpec | None
    constraint: PolytopeU
    M: int
    solver: RHCSolver


def simulate_closed_loop(theta: SystemParams, x0, t_start: int, t_end: int, ctx: SelectionContext,
                         bound: float = np.inf, preview_end: int | None = None) -> float:
    """Cost of the policy applied to the model ``theta`` over ``[t_start, t_end]``.

    Stops early (returning ``inf``) once the running cost reaches ``bound``.
    Under a time-invariant cost the loop also stops at a numerical fixed
    point and charges the remaining steps at the fixed-point stage cost.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    total = 0.0
    warm = None
    invariant = ctx.costs.time_invariant
    for t in range(t_start, t_end + 1):
        prob = HorizonProblem(theta, x, t, ctx.M, ctx.costs, ctx.terminal, ctx.constraint,
                              preview_end if preview_end is not None else None)
        seq = ctx.solver.solve(prob, warm)
        u = first_input(seq, allow_inexact=True)
        c, _, _ = ctx.costs.terms(np.array([t]), x[None, :], u[None, :], grad=False)
        total += float(c[0])
        if total >= bound:
            return np.inf
        x_next = theta.A @ x + theta.B @ u
        if invariant and np.linalg.norm(x_next - x) <= 1e-12 * (1.0 + np.linalg.norm(x)):
            total += float(c[0]) * (t_end - t)
            return total if total < bound else np.inf
        x = x_next
        warm = shift_warm(seq)
    return total


def theta_candidates(conf: ConfidenceSet, n: int, K: int, rng: np.random.Generator,
                     max_tries: int = 50) -> list[np.ndarray]:
    center = project_to_theta(conf.center, n, conf.S)
    cands = [center]
    if conf.radius <= 0 or K <= 1:
        return cands
    d = conf.center.size
    tries = 0
    while len(cands) < K and tries < max_tries * K:
        tries += 1
        th = conf.center + uniform_ball(rng, conf.radius, (d,)).reshape(conf.center.shape)
        if admissible(th, n, conf.S):
            cands.append(th)
    return cands


def state_candidates(y_t, eps_c: float, L: int, rng: np.random.Generator) -> list[np.ndarray]:
    y_t = np.asarray(y_t, dtype=float).reshape(-1)
    cands = [y_t.copy()]
    if eps_c > 0:
        for _ in range(L - 1):
            cands.append(y_t + uniform_ball(rng, eps_c, (y_t.shape[0],)))
    return cands


def select_estimate(conf: ConfidenceSet, y_t, t_start: int, t_end: int, ctx: SelectionContext,
                    eps_c: float, rng: np.random.Generator, K: int = 8, L: int = 4,
                    horizon_cap: int | None = None, preview_end: int | None = None,
                    fixed_theta: np.ndarray | None = None) -> EstimateResult:
    """Joint choice of model and initial nominal state by simulated interval cost.

    Candidates are the admissible projection of the ridge center plus random
    draws from the confidence ball, crossed with ``y_t`` plus random draws
    from the noise ball. Each pair is scored by running the receding-horizon
    policy on that model from that state over the interval; the cheapest
    pair wins, earlier candidates winning ties.
    """
    n = conf.n
    if fixed_theta is not None:
        thetas = [np.asarray(fixed_theta, dtype=float)]
    else:
        thetas = theta_candidates(conf, n, K, rng)
    xs = state_candidates(y_t, eps_c, L, rng)
    if horizon_cap is not None:
        t_end = min(t_end, t_start + horizon_cap - 1)
    pairs = [(th, x) for th in thetas for x in xs]
    if len(pairs) == 1:
        th, x = pairs[0]
        return EstimateResult(SystemParams.from_theta(th, n, conf.S), x, 1, np.nan, conf.center)
    best, best_cost = None, np.inf
    for th, x in pairs:
        model = SystemParams.from_theta(th, n, conf.S)
        try:
            cost = simulate_closed_loop(model, x, t_start, t_end, ctx, best_cost, preview_end)
        except SolverError:
            continue
        if cost < best_cost:
            best, best_cost = (model, x), cost
    if best is None:
        raise SolverError("every estimate candidate failed in simulation")
    return EstimateResult(best[0], best[1], len(pairs), best_cost, conf.center)
