"""Stage-cost families, their lower-bounding functions and terminal costs.

Three families are supported:

``quadratic``  c_t(x, u) = x'Q_t x + u'R_t u,     sigma(x) = ||x||^2
``power``      c_t(x, u) = ||x||^a + ||u||^a,     sigma(x) = ||x||^a
``tracking``   c_t(x, u) = ||x - b||^a,          sigma(x) = ||x - b||^a

Parameters follow a schedule: ``constant`` (one parameter set), ``periodic``
(a list cycled with period len(list)) or ``list`` (one entry per time step,
indexing past the end is an error). Time indices are 1-based.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .linsys import ContractError, SystemParams, spectral_radius

FAMILIES = ("quadratic", "power", "tracking")
SCHEDULES = ("constant", "periodic", "list")


def _stack(values, per_entry_ndim: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == per_entry_ndim:
        arr = arr[None, ...]
    return arr


@dataclass(frozen=True, eq=False)
class StageCostSpec:
    family: str
    schedule: str = "constant"
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    beta_ref: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown cost family {self.family!r}")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if self.family == "quadratic":
            Q, R = _stack(self.Q, 2), _stack(self.R, 2)
            if len(Q) != len(R):
                raise ContractError("Q and R schedules differ in length")
            if np.any(np.linalg.eigvalsh(0.5 * (Q + Q.transpose(0, 2, 1))) < -1e-12):
                raise ContractError("Q_t must be positive semidefinite")
            if np.any(np.linalg.eigvalsh(0.5 * (R + R.transpose(0, 2, 1))) <= 0):
                raise ContractError("R_t must be positive definite")
            object.__setattr__(self, "Q", Q)
            object.__setattr__(self, "R", R)
            periods = {len(Q)}
        else:
            a = np.atleast_1d(np.asarray(self.a, dtype=float))
            if np.any(a <= 0):
                raise ContractError("the exponent a must be positive")
            object.__setattr__(self, "a", a)
            periods = {len(a)}
            if self.family == "tracking":
                b = _stack(self.b, 1)
                if len(a) == 1 and len(b) > 1:
                    a = np.full(len(b), a[0])
                    object.__setattr__(self, "a", a)
                elif len(b) == 1 and len(a) > 1:
                    b = np.repeat(b, len(a), axis=0)
                object.__setattr__(self, "b", b)
                periods = {len(a), len(b)}
        if len(periods) != 1:
            raise ContractError("parameter schedules must share one length")
        if self.schedule == "constant" and periods != {1}:
            raise ContractError("a constant schedule takes exactly one parameter set")

    # construction helpers -------------------------------------------------
    @classmethod
    def quadratic(cls, Q, R, schedule: str = "constant") -> "StageCostSpec":
        return cls("quadratic", schedule, Q=np.atleast_2d(Q) if np.ndim(Q) < 2 else Q,
                   R=np.atleast_2d(R) if np.ndim(R) < 2 else R)

    @classmethod
    def power(cls, a, schedule: str = "constant") -> "StageCostSpec":
        return cls("power", schedule, a=a)

    @classmethod
    def tracking(cls, b, a, beta_ref: float | None = None, schedule: str = "constant") -> "StageCostSpec":
        return cls("tracking", schedule, a=a, b=np.atleast_1d(b) if np.ndim(b) == 0 else b,
                   beta_ref=beta_ref)

    # schedule --------------------------------------------------------------
    @property
    def period(self) -> int:
        return len(self.Q) if self.family == "quadratic" else len(self.a)

    @property
    def time_invariant(self) -> bool:
        return self.period == 1

    def index(self, t) -> np.ndarray | int:
        t = np.asarray(t)
        if np.any(t < 1):
            raise ContractError("time indices start at 1")
        if self.schedule == "constant":
            idx = np.zeros_like(t)
        elif self.schedule == "periodic":
            idx = (t - 1) % self.period
        else:
            if np.any(t > self.period):
                raise ContractError(f"time index beyond the cost schedule (length {self.period})")
            idx = t - 1
        return int(idx) if idx.ndim == 0 else idx

    @property
    def convex(self) -> bool:
        return self.family == "quadratic" or bool(np.all(self.a >= 1.0))

    # evaluation ------------------------------------------------------------
    def terms(self, ts, X, U, grad: bool = True):
        """Stage values and gradients along a trajectory.

        ``ts`` has shape (M,), ``X`` (M, n), ``U`` (M, m). Returns
        ``(values, gx, gu)`` with the gradients ``None`` when ``grad`` is false.
        """
        idx = self.index(np.asarray(ts))
        if self.family == "quadratic":
            Q, R = self.Q[idx], self.R[idx]
            QX = np.einsum("kij,kj->ki", Q, X)
            RU = np.einsum("kij,kj->ki", R, U)
            vals = np.einsum("ki,ki->k", X, QX) + np.einsum("ki,ki->k", U, RU)
            if not grad:
                return vals, None, None
            return vals, 2.0 * QX, 2.0 * RU
        a = self.a[idx]
        if self.family == "power":
            nx = np.linalg.norm(X, axis=1)
            nu = np.linalg.norm(U, axis=1)
            vals = nx**a + nu**a
            if not grad:
                return vals, None, None
            return vals, _power_grad(X, nx, a), _power_grad(U, nu, a)
        D = X - self.b[idx]
        nd = np.linalg.norm(D, axis=1)
        vals = nd**a
        if not grad:
            return vals, None, None
        return vals, _power_grad(D, nd, a), np.zeros_like(U)

    def quadratic_blocks(self, ts):
        if self.family != "quadratic":
            raise ContractError("quadratic_blocks is only defined for the quadratic family")
        idx = self.index(np.asarray(ts))
        return self.Q[idx], self.R[idx]

    def sigma(self, x, t: int = 1) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        i = self.index(t)
        if self.family == "quadratic":
            return float(x @ x)
        if self.family == "power":
            return float(np.linalg.norm(x) ** self.a[i])
        return float(np.linalg.norm(x - self.b[i]) ** self.a[i])


def _power_grad(V, norms, a):
    # gradient of ||v||^a, taken as zero at the origin
    scale = np.zeros_like(norms)
    nz = norms > 0
    scale[nz] = a[nz] * norms[nz] ** (a[nz] - 2.0)
    return scale[:, None] * V


def eval_stage(spec: StageCostSpec, t: int, x, u) -> float:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    u = np.asarray(u, dtype=float).reshape(1, -1)
    vals, _, _ = spec.terms(np.array([t]), x, u, grad=False)
    return float(vals[0])


def eval_sigma(spec: StageCostSpec, x, t: int = 1) -> float:
    return spec.sigma(x, t)


@dataclass(frozen=True, eq=False)
class TerminalCostSpec:
    """Quadratic terminal penalty ``Gamma * (x - center)' P (x - center)``."""

    P: np.ndarray
    Gamma: float = 1.0
    sigma: str = "quadratic"
    center: np.ndarray | None = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        P = 0.5 * (P + P.T)
        if np.linalg.eigvalsh(P)[0] <= 0:
            raise ContractError("terminal weight P must be positive definite")
        if self.Gamma < 1.0:
            raise ContractError("Gamma must be at least 1")
        if self.sigma not in ("quadratic", "power", "tracking"):
            raise ContractError(f"unknown sigma tag {self.sigma!r}")
        object.__setattr__(self, "P", P)
        c = np.zeros(P.shape[0]) if self.center is None else np.asarray(self.center, dtype=float).reshape(-1)
        object.__setattr__(self, "center", c)

    @property
    def alpha_d(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[0])

    def d(self, x) -> float:
        e = np.asarray(x, dtype=float).reshape(-1) - self.center
        return float(e @ self.P @ e)

    def value(self, x) -> float:
        return self.Gamma * self.d(x)

    def grad(self, x) -> np.ndarray:
        e = np.asarray(x, dtype=float).reshape(-1) - self.center
        return 2.0 * self.Gamma * (self.P @ e)

    def with_gamma(self, Gamma: float) -> "TerminalCostSpec":
        return TerminalCostSpec(self.P, Gamma, self.sigma, self.center)


def synth_terminal(corners, Gamma: float = 1.0, max_iter: int = 50, center=None) -> TerminalCostSpec:
    """Terminal weight with ``A'PA - P <= -I`` at every corner ``A``.

    Starts from the Lyapunov solution ``A'PA - P = -2I`` of the corner with the
    largest spectral radius and, while some corner fails the decrease test,
    adds that corner's Lyapunov solution.
    """
    As = [np.atleast_2d(np.asarray(A, dtype=float)) for A in corners]
    if not As:
        raise ContractError("need at least one corner")
    for A in As:
        if spectral_radius(A) >= 1.0:
            raise ContractError("every corner must be Schur stable")
    n = As[0].shape[0]
    two_i = 2.0 * np.eye(n)
    dominant = max(As, key=spectral_radius)
    P = solve_discrete_lyapunov(dominant.T, two_i)
    for _ in range(max_iter):
        P = 0.5 * (P + P.T)
        failing = [A for A in As if lyapunov_margin(A, P) < 1.0 - 1e-8]
        if not failing:
            return TerminalCostSpec(P, Gamma, center=center)
        worst = min(failing, key=lambda A: lyapunov_margin(A, P))
        P = P + solve_discrete_lyapunov(worst.T, two_i)
    raise ContractError(
        "no common terminal weight found within the iteration budget; "
        "fall back to d = 0 with a longer horizon"
    )


def lyapunov_margin(A, P) -> float:
    """Smallest eigenvalue of ``P - A'PA`` (at least 1 when the decrease test holds)."""
    A = np.atleast_2d(A)
    D = P - A.T @ P @ A
    return float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])


def box_corners(theta_hat: SystemParams, radius: float):
    """Corner matrices ``A`` of the entrywise box of half-width ``radius`` around ``A_hat``."""
    A0 = theta_hat.A
    n = A0.shape[0]
    corners = []
    for signs in np.ndindex(*(2,) * (n * n)):
        delta = (2 * np.array(signs, dtype=float) - 1).reshape(n, n) * radius
        corners.append(A0 + delta)
    return corners


@dataclass(frozen=True)
class CostBoundReport:
    alpha_hat: float
    worst_x: tuple
    n_samples: int
    declared_alpha: float | None

    @property
    def flagged(self) -> bool:
        return self.declared_alpha is not None and self.alpha_hat < self.declared_alpha


def verify_assumption3(
    spec: StageCostSpec,
    rng: np.random.Generator,
    n: int,
    m: int,
    n_samples: int = 2000,
    x_radius: float = 5.0,
    u_radius: float = 5.0,
    alpha: float | None = None,
    t: int = 1,
) -> CostBoundReport:
    X = rng.uniform(-x_radius, x_radius, (n_samples, n))
    U = rng.uniform(-u_radius, u_radius, (n_samples, m))
    vals, _, _ = spec.terms(np.full(n_samples, t), X, U, grad=False)
    sig = np.array([spec.sigma(x, t) for x in X])
    ok = sig > 1e-12
    if not np.any(ok):
        return CostBoundReport(np.inf, (), 0, alpha)
    ratios = vals[ok] / sig[ok]
    k = int(np.argmin(ratios))
    return CostBoundReport(float(ratios[k]), tuple(X[ok][k]), int(ok.sum()), alpha)


def lipschitz_estimate(
    spec: StageCostSpec,
    rng: np.random.Generator,
    n: int,
    m: int,
    x_radius: float,
    u_radius: float,
    n_pairs: int = 4000,
    t: int = 1,
) -> float:
    """Largest observed ``|c(x,u) - c(x',u')| / (||x-x'|| + ||u-u'||)`` on the domain."""
    X1 = rng.uniform(-x_radius, x_radius, (n_pairs, n))
    U1 = rng.uniform(-u_radius, u_radius, (n_pairs, m))
    X2 = np.clip(X1 + 0.05 * rng.standard_normal((n_pairs, n)), -x_radius, x_radius)
    U2 = np.clip(U1 + 0.05 * rng.standard_normal((n_pairs, m)), -u_radius, u_radius)
    ts = np.full(n_pairs, t)
    c1, _, _ = spec.terms(ts, X1, U1, grad=False)
    c2, _, _ = spec.terms(ts, X2, U2, grad=False)
    dist = np.linalg.norm(X1 - X2, axis=1) + np.linalg.norm(U1 - U2, axis=1)
    ok = dist > 1e-12
    return float(np.max(np.abs(c1 - c2)[ok] / dist[ok]))


def terminal_decrease_gap(
    terminal: TerminalCostSpec,
    theta: SystemParams,
    u_tilde,
    rng: np.random.Generator,
    n_samples: int = 1000,
    radius: float = 5.0,
) -> float:
    """Largest ``d(Ax + B u_tilde) - d(x)`` over sampled states (<= 0 when the condition holds)."""
    X = rng.uniform(-radius, radius, (n_samples, theta.n)) + terminal.center
    Xn = X @ theta.A.T + np.asarray(u_tilde, dtype=float).reshape(-1) @ theta.B.T
    E0 = X - terminal.center
    E1 = Xn - terminal.center
    d0 = np.einsum("ki,ij,kj->k", E0, terminal.P, E0)
    d1 = np.einsum("ki,ij,kj->k", E1, terminal.P, E1)
    return float(np.max(d1 - d0))


def quadratic_constants(spec: StageCostSpec, terminal: TerminalCostSpec) -> dict:
    """Constants of the quadratic family with ``sigma = ||x||^2`` and ``u_tilde = 0``."""
    lam_q = np.linalg.eigvalsh(spec.Q)
    return {
        "alpha": float(lam_q[:, 0].min()),
        "alpha_c": float(lam_q[:, -1].max()),
        "alpha_d": terminal.alpha_d,
    }


def required_gamma(alpha_bar: float, alpha_c: float, alpha: float, alpha_d: float) -> float:
    return max(1.0, alpha_bar * alpha_c / (alpha * alpha_d))
