"""Reference solutions and the invariant suite behind ``pe-rhc check``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import StageCostSpec, TerminalCostSpec
from .linsys import SystemParams, random_system
from .rhc import HorizonProblem, PolytopeU, RHCSolver


def lqr_dp(A, B, Q, R, P_M, M: int, x0) -> tuple[np.ndarray, float]:
    """Finite-horizon LQR by backward Riccati recursion.

    Minimizes ``sum_{k<M} x'Qx + u'Ru + x_M' P_M x_M``; returns the optimal
    input sequence from ``x0`` and its cost ``x0' P_0 x0``.
    """
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R, P = np.atleast_2d(Q), np.atleast_2d(R), np.atleast_2d(P_M)
    gains = []
    for _ in range(M):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        gains.append(K)
    gains.reverse()
    x = np.asarray(x0, dtype=float).reshape(-1)
    cost = float(x @ P @ x)
    us = []
    for K in gains:
        u = -K @ x
        us.append(u)
        x = A @ x + B @ u
    return np.array(us), cost


def random_lqr_instance(rng: np.random.Generator, n_max: int = 2, m_max: int = 2, M_max: int = 5):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    M = int(rng.integers(1, M_max + 1))
    theta = random_system(rng, n, m, rho_max=0.95)
    Lq = rng.standard_normal((n, n))
    Lr = rng.standard_normal((m, m))
    Q = Lq @ Lq.T + 0.1 * np.eye(n)
    R = Lr @ Lr.T + 0.1 * np.eye(m)
    Lp = rng.standard_normal((n, n))
    P = Lp @ Lp.T + 0.1 * np.eye(n)
    x0 = rng.standard_normal(n)
    return theta, Q, R, P, M, x0


def dp_equivalence(n_instances: int = 100, seed: int = 0) -> float:
    """Largest input deviation between the horizon solver and the Riccati oracle."""
    rng = np.random.default_rng(seed)
    solver = RHCSolver()
    worst = 0.0
    for _ in range(n_instances):
        theta, Q, R, P, M, x0 = random_lqr_instance(rng)
        U_dp, _ = lqr_dp(theta.A, theta.B, Q, R, P, M, x0)
        big = 1e6 * (1.0 + np.abs(U_dp).max())
        U = PolytopeU.from_box(-big, big, theta.m)
        prob = HorizonProblem(theta, x0, 1, M, StageCostSpec.quadratic(Q, R), TerminalCostSpec(P), U)
        seq = solver.solve(prob)
        worst = max(worst, float(np.abs(seq.U - U_dp).max()))
    return worst


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def run_invariants(logs, U: PolytopeU, coverage_min: float = 0.9, dp_instances: int = 20) -> list[CheckResult]:
    """PoE, window integrity, coverage, feasibility split and DP equivalence."""
    results = []
    recs = [r for lg in logs for r in lg.intervals]
    n_fail = sum(not r.poe_pass for r in recs)
    results.append(CheckResult("persistence of excitation", n_fail == 0 and len(recs) > 0,
                               f"{len(recs) - n_fail}/{len(recs)} intervals pass"))
    sig = np.concatenate([lg.sigma_min for lg in logs])
    sig = sig[np.isfinite(sig)]
    gap = np.concatenate([lg.col_norm - lg.col_floor for lg in logs])
    gap = gap[np.isfinite(gap)]
    ok = len(sig) > 0 and sig.min() > 1e-10 and (len(gap) == 0 or gap.min() >= -1e-10)
    results.append(CheckResult("window integrity", bool(ok),
                               f"min sigma {sig.min() if len(sig) else float('nan'):.3g}, "
                               f"min column slack {gap.min() if len(gap) else float('nan'):.3g}"))
    covered = [all(r.covered for r in lg.intervals) for lg in logs]
    rate = float(np.mean(covered)) if covered else 0.0
    results.append(CheckResult("confidence coverage", rate >= coverage_min, f"rate {rate:.3f} (need {coverage_min})"))
    worst_uhat = max(float(lg.uhat_violation.max()) for lg in logs)
    results.append(CheckResult("feasibility split", worst_uhat <= 1e-8, f"max nominal violation {worst_uhat:.3g}"))
    dev = dp_equivalence(dp_instances)
    results.append(CheckResult("DP equivalence", dev <= 1e-6, f"max input deviation {dev:.3g}"))
    return results
