"""Closed-loop runs: online learning RHC, explore-then-commit and the baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .costs import StageCostSpec, TerminalCostSpec
from .estimator import (
    ConfidenceSet,
    DataLog,
    SelectionContext,
    confidence_radius,
    gamma_y_formula,
    ridge_fit,
    select_estimate,
)
from .explorer import InputWindow, check_poe, perturb, periodic_excitation_input, window_vectors
from .linsys import ContractError, NoiseModel, SystemParams, observe, step
from .rhc import (
    ControlSequence,
    HorizonProblem,
    PolytopeU,
    RHCSolver,
    SolverError,
    first_input,
    shift_warm,
)


class RunError(RuntimeError):
    """A sub-solver failure inside a run, tagged with the time step."""

    def __init__(self, t: int, cause: Exception):
        super().__init__(f"step {t}: {cause}")
        self.t = t
        self.cause = cause


@dataclass(frozen=True)
class IntervalSchedule:
    """Doubling intervals ``H_i = 2^(i-1) H`` ending at ``t_i = (2^i - 1) H``."""

    H: int
    T: int
    offset: int = 0

    def __post_init__(self):
        if self.H < 1 or self.T < 1:
            raise ContractError("H and T must be positive")

    def t_end(self, i: int) -> int:
        """Nominal end ``t_i`` of interval ``i`` (``t_0 = 0``), not truncated at T."""
        return self.offset + (2**i - 1) * self.H

    def length(self, i: int) -> int:
        return 2 ** (i - 1) * self.H

    def c_p(self, i: int) -> float:
        return self.length(i) ** -0.5

    def interval_of(self, t: int) -> int:
        s = t - self.offset
        if s < 1:
            raise ContractError("time precedes the schedule")
        return int(math.floor(math.log2((s - 1) // self.H + 1))) + 1

    @property
    def count(self) -> int:
        return self.interval_of(self.T)

    def intervals(self):
        """``(i, start, end)`` for every interval touching ``[offset+1, T]``, ends truncated at T."""
        for i in range(1, self.count + 1):
            yield i, self.t_end(i - 1) + 1, min(self.t_end(i), self.T)


@dataclass(frozen=True)
class RunConfig:
    T: int
    H: int = 16
    M: int = 10
    Gamma: float = 1.0
    delta: float = 0.1
    lam: float | None = None
    seed: int = 0
    K: int = 8
    L: int = 4
    gamma: float | None = None
    perturb: bool = True
    pin_theta: bool = False
    drop_interval_start: bool = False
    select_horizon: int | None = None
    N: int | None = None
    etc_constant: float = 1.0

    def __post_init__(self):
        if self.T < 1 or self.H < 1 or self.M < 1:
            raise ContractError("T, H and M must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ContractError("delta must lie in (0, 1)")

    @property
    def lam_value(self) -> float:
        return 1.0 / self.T if self.lam is None else float(self.lam)

    @property
    def delta_tilde(self) -> float:
        return self.delta / (2.0 * math.log(2.0 * self.T))

    def gamma_value(self, n: int, m: int) -> float:
        return 1.0 / ((n + 1) * m) if self.gamma is None else float(self.gamma)


STEP_FIELDS = ("cost", "violation", "uhat_violation", "iterations", "residual", "sigma_min", "col_norm", "col_floor")


@dataclass
class IntervalRecord:
    i: int
    t_i: int
    beta_i: float
    theta_err_fro: float
    ridge_err_fro: float
    lambda_min_V: float
    poe_bound: float
    covered: bool

    @property
    def poe_pass(self) -> bool:
        return self.lambda_min_V >= self.poe_bound


@dataclass
class TrajectoryLog:
    """Per-step arrays (time index ``k`` stored at row ``k-1``) and interval records."""

    n: int
    m: int
    T: int
    t: np.ndarray = field(init=False)
    interval: np.ndarray = field(init=False)
    x: np.ndarray = field(init=False)
    y: np.ndarray = field(init=False)
    xbar: np.ndarray = field(init=False)
    uhat: np.ndarray = field(init=False)
    du: np.ndarray = field(init=False)
    u: np.ndarray = field(init=False)
    intervals: list = field(default_factory=list)
    models: list = field(default_factory=list)
    controller: str = "online-rhc"

    def __post_init__(self):
        T, n, m = self.T, self.n, self.m
        self.t = np.arange(1, T + 1)
        self.interval = np.zeros(T, dtype=int)
        self.x, self.y, self.xbar = np.zeros((T, n)), np.zeros((T, n)), np.zeros((T, n))
        self.uhat, self.du, self.u = np.zeros((T, m)), np.zeros((T, m)), np.zeros((T, m))
        for name in STEP_FIELDS:
            setattr(self, name, np.full(T, np.nan) if name in ("sigma_min", "col_norm", "col_floor") else np.zeros(T))

    @property
    def total_cost(self) -> float:
        return float(self.cost.sum())

    @property
    def total_violation(self) -> float:
        return float(self.violation.sum())


def _rhc_step(solver: RHCSolver, theta, x, t, cfg, costs, terminal, U, preview_end, warm):
    # terminal already carries cfg.Gamma (see _gamma_terminal)
    try:
        seq = solver.solve(HorizonProblem(theta, x, t, cfg.M, costs, terminal, U, preview_end), warm)
        u = first_input(seq, allow_inexact=True)
    except SolverError as exc:
        raise RunError(t, exc) from exc
    return u, seq


def _streams(seed: int):
    noise_ss, select_ss, _ = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(noise_ss), np.random.default_rng(select_ss)


def _check_U(U: PolytopeU, t: int = 1):
    if U.is_empty:
        raise RunError(t, SolverError("the input polytope is empty"))


def _column_record(log: TrajectoryLog, k: int, window: InputWindow, c_p: float):
    if window.completed >= 1:
        col = window.columns(1)[:, 0]
        log.col_norm[k] = np.linalg.norm(col)
        log.col_floor[k] = np.sqrt(c_p)
    Mw = window.window_matrix()
    if Mw is not None:
        log.sigma_min[k] = np.linalg.svd(Mw, compute_uv=False)[-1]


def run_online_rhc(sys: SystemParams, noise: NoiseModel, costs: StageCostSpec, terminal: TerminalCostSpec | None,
                   U: PolytopeU, cfg: RunConfig, x1=None) -> TrajectoryLog:
    """Learning receding-horizon control with directional perturbations.

    At the start of each doubling interval the model is refit on all data so
    far, a confidence ball is formed and the pair (model, nominal state) is
    chosen by simulated interval cost. Within the interval the nominal state
    follows the chosen model driven by the unperturbed RHC input, and the
    applied input adds a perturbation of size ``sqrt(c_p)`` that keeps the
    input window full rank.
    """
    n, m, T = sys.n, sys.m, cfg.T
    if T < cfg.H:
        raise ContractError("T must be at least H")
    _check_U(U)
    rng_noise, rng_sel = _streams(cfg.seed)
    sched = IntervalSchedule(cfg.H, T)
    solver = RHCSolver()
    terminal = _gamma_terminal(terminal, cfg)
    ctx = SelectionContext(costs, terminal, U, cfg.M, solver)
    data = DataLog(n, m, T + 1)
    window = InputWindow(n, m)
    log = TrajectoryLog(n, m, T)
    gamma = cfg.gamma_value(n, m)
    lam, dt = cfg.lam_value, cfg.delta_tilde
    R = noise.R
    gamma_y = gamma_y_formula(gamma, n, m, R, cfg.H, dt)
    V = np.zeros((n + m, n + m))
    x = np.zeros(n) if x1 is None else np.asarray(x1, dtype=float).reshape(n)
    S = sys.S
    theta_hat = None
    xbar = None
    warm = None
    interval_starts = [start for _, start, _ in sched.intervals()]

    for t in range(1, T + 1):
        k = t - 1
        y = observe(x, noise, rng_noise)
        data.add_observation(y)
        i = sched.interval_of(t)
        i_end = min(sched.t_end(i), T)
        if t == 1 or t == sched.t_end(i - 1) + 1:
            t_prev = sched.t_end(i - 1)
            if cfg.pin_theta:
                conf = None
                theta_hat, xbar = sys, y.copy()
            else:
                if t == 1:
                    conf = ConfidenceSet.prior(n, m, S)
                else:
                    exclude = interval_starts if cfg.drop_interval_start else ()
                    center = ridge_fit(data, lam, upto=t_prev, exclude=exclude)
                    R_t, beta = confidence_radius(n, m, S, R, gamma, sched.c_p(i - 1), t_prev, lam, gamma_y, dt)
                    conf = ConfidenceSet(center, beta, S, R_t, gamma_y)
                try:
                    est = select_estimate(conf, y, t, i_end, ctx, noise.eps_c, rng_sel, cfg.K, cfg.L,
                                          cfg.select_horizon, preview_end=i_end)
                except SolverError as exc:
                    raise RunError(t, exc) from exc
                theta_hat, xbar = est.theta_hat, est.x_hat.copy()
            log.models.append((t, theta_hat))
            if t > 1:
                rep = check_poe(V=V, gamma=gamma, c_p_i=sched.c_p(i - 1), t_i=t_prev, interval=i - 1)
                _record_interval(log, i - 1, t_prev, conf, theta_hat, sys, rep)
            warm = None
        log.interval[k] = i
        log.x[k], log.y[k], log.xbar[k] = x, y, xbar
        uhat, seq = _rhc_step(solver, theta_hat, xbar, t, cfg, costs, terminal, U, i_end, warm)
        warm = shift_warm(seq)
        c_p = sched.c_p(i)
        du = perturb(uhat, window, c_p) if cfg.perturb else np.zeros(m)
        u = uhat + du
        window.push(u)
        data.add_input(u)
        z = np.concatenate([x, u])
        V += np.outer(z, z)
        log.uhat[k], log.du[k], log.u[k] = uhat, du, u
        log.cost[k] = costs.terms(np.array([t]), x[None, :], u[None, :], grad=False)[0][0]
        log.violation[k] = U.violation(u)
        log.uhat_violation[k] = U.violation(uhat)
        log.iterations[k], log.residual[k] = seq.iterations, seq.residual
        if cfg.perturb:
            _column_record(log, k, window, c_p)
        xbar = theta_hat.A @ xbar + theta_hat.B @ uhat
        x = step(sys, x, u)
    return log


def _gamma_terminal(terminal, cfg):
    if terminal is None or terminal.Gamma == cfg.Gamma:
        return terminal
    return terminal.with_gamma(cfg.Gamma)


def _record_interval(log: TrajectoryLog, i: int, t_i: int, conf: ConfidenceSet | None, theta_hat: SystemParams,
                     sys: SystemParams, rep):
    err = float(np.linalg.norm(theta_hat.theta - sys.theta))
    if conf is None:
        beta, ridge_err, covered = 0.0, err, True
    else:
        beta = conf.radius
        ridge_err = float(np.linalg.norm(conf.center - sys.theta))
        covered = conf.contains(sys)
    log.intervals.append(IntervalRecord(i, t_i, beta, err, ridge_err, rep.lambda_min, rep.bound, covered))


def etc_min_length(n: int, m: int, R: float, c_tilde: float, delta_tilde: float, constant: float = 1.0) -> int:
    """Smallest admissible exploration length: ``q + ceil(C 16 n^2 R^2 / c log(sqrt2^(n+m) / delta))``."""
    q = (n + 1) * m
    extra = constant * 16.0 * n * n * R * R / c_tilde * math.log(math.sqrt(2.0) ** (n + m) / delta_tilde)
    return q + int(math.ceil(max(extra, 0.0))) + 1


def excitation_level(n: int, m: int, scale: float, periods: int = 4) -> float:
    """Per-step Gram level of the periodic exploration sequence from a dry run of its windows."""
    q = (n + 1) * m
    length = periods * q + n
    Useq = np.array([periodic_excitation_input(t, n, m, scale) for t in range(1, length + 1)])
    Wv = window_vectors(Useq, n)[: periods * q]
    return float(np.linalg.eigvalsh(Wv.T @ Wv)[0] / len(Wv))


def run_etc(sys: SystemParams, noise: NoiseModel, costs: StageCostSpec, terminal: TerminalCostSpec | None,
            U: PolytopeU, cfg: RunConfig, x1=None) -> TrajectoryLog:
    """Explore with a periodic input for ``N`` steps, fit once, then run RHC on the fixed model."""
    n, m, T = sys.n, sys.m, cfg.T
    N = int(math.ceil(T ** (2.0 / 3.0))) if cfg.N is None else int(cfg.N)
    dt = cfg.delta / (n * (n + 2))
    scale = float((n + 1) * m)
    c_tilde = excitation_level(n, m, scale)
    N_min = etc_min_length(n, m, noise.R, c_tilde, dt, cfg.etc_constant)
    if N < N_min:
        raise ContractError(f"exploration length N={N} is below the required minimum {N_min}")
    if N >= T:
        raise ContractError("exploration length must be shorter than T")
    _check_U(U)
    rng_noise, rng_sel = _streams(cfg.seed)
    solver = RHCSolver()
    terminal = _gamma_terminal(terminal, cfg)
    ctx = SelectionContext(costs, terminal, U, cfg.M, solver)
    data = DataLog(n, m, T + 1)
    log = TrajectoryLog(n, m, T, controller="etc")
    gamma = 1.0 / ((n + 1) * m)
    V = np.zeros((n + m, n + m))
    x = np.zeros(n) if x1 is None else np.asarray(x1, dtype=float).reshape(n)
    sched = IntervalSchedule(cfg.H, T, offset=N)
    theta_hat, xbar, warm, conf = None, None, None, None

    for t in range(1, T + 1):
        k = t - 1
        y = observe(x, noise, rng_noise)
        data.add_observation(y)
        if t <= N:
            u = periodic_excitation_input(t, n, m, scale)
            uhat, du, seq = u, np.zeros(m), None
            log.interval[k] = 0
            log.xbar[k] = np.nan
        else:
            i = sched.interval_of(t)
            i_end = min(sched.t_end(i), T)
            if t == sched.t_end(i - 1) + 1:
                if t == N + 1:
                    try:
                        center = ridge_fit(data, 0.0, upto=N)
                    except ContractError as exc:
                        raise RunError(t, exc) from exc
                    R_t, beta = confidence_radius(n, m, sys.S, noise.R, gamma, c_tilde, N, 0.0, 1.0, dt)
                    conf = ConfidenceSet(center, beta, sys.S, R_t, 1.0)
                    est = select_estimate(conf, y, t, i_end, ctx, noise.eps_c, rng_sel, cfg.K, cfg.L,
                                          cfg.select_horizon, preview_end=i_end)
                    rep = check_poe(V=V, gamma=gamma, c_p_i=c_tilde, t_i=N, interval=1)
                    _record_interval(log, 1, N, conf, est.theta_hat, sys, rep)
                    theta_hat = est.theta_hat
                    log.models.append((t, theta_hat))
                else:
                    est = select_estimate(conf, y, t, i_end, ctx, noise.eps_c, rng_sel, 1, cfg.L,
                                          cfg.select_horizon, preview_end=i_end, fixed_theta=theta_hat.theta)
                xbar = est.x_hat.copy()
                warm = None
            log.interval[k] = i
            log.xbar[k] = xbar
            uhat, seq = _rhc_step(solver, theta_hat, xbar, t, cfg, costs, terminal, U, i_end, warm)
            warm = shift_warm(seq)
            du = np.zeros(m)
            u = uhat
            xbar = theta_hat.A @ xbar + theta_hat.B @ uhat
        data.add_input(u)
        z = np.concatenate([x, u])
        V += np.outer(z, z)
        log.x[k], log.y[k] = x, y
        log.uhat[k], log.du[k], log.u[k] = uhat, du, u
        log.cost[k] = costs.terms(np.array([t]), x[None, :], u[None, :], grad=False)[0][0]
        log.violation[k] = U.violation(u)
        log.uhat_violation[k] = 0.0 if t <= N else U.violation(uhat)
        if seq is not None:
            log.iterations[k], log.residual[k] = seq.iterations, seq.residual
        x = step(sys, x, u)
    return log


def run_oracle_baseline(sys: SystemParams, costs: StageCostSpec, terminal: TerminalCostSpec | None, U: PolytopeU,
                        cfg: RunConfig, x1=None, t_start: int = 1) -> TrajectoryLog:
    """RHC on the true model from the true state over ``[t_start, T]``."""
    n, m, T = sys.n, sys.m, cfg.T
    _check_U(U, t_start)
    solver = RHCSolver()
    terminal = _gamma_terminal(terminal, cfg)
    length = T - t_start + 1
    log = TrajectoryLog(n, m, length, controller="oracle")
    log.t = np.arange(t_start, T + 1)
    x = np.zeros(n) if x1 is None else np.asarray(x1, dtype=float).reshape(n)
    warm = None
    for k, t in enumerate(range(t_start, T + 1)):
        u, seq = _rhc_step(solver, sys, x, t, cfg, costs, terminal, U, T, warm)
        warm = shift_warm(seq)
        log.x[k], log.y[k], log.xbar[k] = x, x, x
        log.uhat[k], log.u[k] = u, u
        log.interval[k] = 0
        log.cost[k] = costs.terms(np.array([t]), x[None, :], u[None, :], grad=False)[0][0]
        log.violation[k] = U.violation(u)
        log.uhat_violation[k] = log.violation[k]
        log.iterations[k], log.residual[k] = seq.iterations, seq.residual
        x = step(sys, x, u)
    return log


def run_hindsight(sys: SystemParams, costs: StageCostSpec, U: PolytopeU, cfg: RunConfig, x1=None) -> ControlSequence:
    """Best input sequence over ``[1, T]`` with full knowledge, no terminal cost."""
    x = np.zeros(sys.n) if x1 is None else np.asarray(x1, dtype=float).reshape(sys.n)
    _check_U(U)
    prob = HorizonProblem(sys, x, 1, cfg.T, costs, None, U, cfg.T)
    seq = RHCSolver().solve(prob)
    if seq.status == "infeasible":
        raise RunError(1, SolverError("hindsight problem is infeasible"))
    return seq


def hindsight_log(sys: SystemParams, costs: StageCostSpec, U: PolytopeU, seq: ControlSequence, x1=None) -> TrajectoryLog:
    """Trajectory generated by a full-length input sequence."""
    n, m, T = sys.n, sys.m, len(seq)
    log = TrajectoryLog(n, m, T, controller="hindsight")
    x = np.zeros(n) if x1 is None else np.asarray(x1, dtype=float).reshape(n)
    for k in range(T):
        u = seq.U[k]
        log.x[k], log.y[k], log.xbar[k] = x, x, x
        log.uhat[k], log.u[k] = u, u
        x = step(sys, x, u)
    log.cost[:] = costs.terms(log.t, log.x, log.u, grad=False)[0]
    log.violation[:] = U.violation(log.u)
    log.uhat_violation[:] = log.violation
    return log


def theory_constants(n: int, m: int, R: float, gamma: float, T: int, delta: float) -> dict:
    q = (n + 1) * m
    n_c = (16.0 * n * n * R * R / gamma) ** 2
    n_tilde = math.sqrt(2.0) ** (n + m + 2)
    inner = n_c * math.log(n_tilde * math.log(2.0 * T) / delta) ** 2
    j_star = int(math.ceil(max(2.0 * q, inner) / q))
    H = j_star * n_c + n
    return {
        "q": q,
        "n_c": n_c,
        "n_tilde": n_tilde,
        "j_star": j_star,
        "H": H,
        "delta_tilde": delta / (2.0 * math.log(2.0 * T)),
        "H_exceeds_T": H > T,
        "n_c_below_one": n_c < 1.0,
    }


def violation_envelope(H: int, T: int) -> float:
    """``sum_i sqrt(c_p,i) * H_i`` over the intervals covering ``[1, T]`` (last one truncated)."""
    sched = IntervalSchedule(H, T)
    return float(sum(sched.c_p(i) ** 0.5 * (end - start + 1) for i, start, end in sched.intervals()))
