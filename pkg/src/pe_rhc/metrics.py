"""Regret, cumulative constraint violation and log-log slope fits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linsys import ContractError
from .rhc import PolytopeU


def _costs(x) -> np.ndarray:
    if hasattr(x, "cost"):
        return np.asarray(x.cost, dtype=float)
    return np.asarray(x, dtype=float).reshape(-1)


def regret(traj, reference) -> float:
    """Total cost of ``traj`` minus a reference total.

    ``reference`` is either a scalar total or another trajectory (or
    per-step cost array) over the same horizon.
    """
    c = _costs(traj)
    if not hasattr(reference, "cost") and np.ndim(reference) == 0:
        return float(c.sum() - float(reference))
    ref = _costs(reference)
    if ref.shape != c.shape:
        raise ContractError(f"horizon mismatch: {c.shape[0]} vs {ref.shape[0]} steps")
    return float(c.sum() - ref.sum())


def violation(traj, U: PolytopeU) -> float:
    u = traj.u if hasattr(traj, "u") else np.atleast_2d(np.asarray(traj, dtype=float))
    return float(U.violation(u).sum())


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    n_points: int


def slope_fit(points, values=None) -> SlopeFit:
    """Least squares line through ``(log T, log value)``.

    Accepts a list of ``(T, value)`` pairs, or two sequences.
    """
    if values is None:
        arr = np.asarray(points, dtype=float)
        Ts, vals = arr[:, 0], arr[:, 1]
    else:
        Ts, vals = np.asarray(points, dtype=float), np.asarray(values, dtype=float)
    if len(Ts) < 3:
        raise ContractError("a slope fit needs at least 3 points")
    if np.any(vals <= 0) or np.any(Ts <= 0):
        raise ContractError("slope fits need positive values")
    lx, ly = np.log(Ts), np.log(vals)
    X = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(X, ly, rcond=None)
    resid = ly - X @ np.array([slope, intercept])
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), r2, len(Ts))


def robust_slope_fit(points, values=None, r2_min: float = 0.9) -> dict:
    """Full fit, plus a refit without the smallest T when the full fit has ``r2 < r2_min``."""
    if values is None:
        arr = np.asarray(points, dtype=float)
        Ts, vals = arr[:, 0], arr[:, 1]
    else:
        Ts, vals = np.asarray(points, dtype=float), np.asarray(values, dtype=float)
    order = np.argsort(Ts)
    Ts, vals = Ts[order], vals[order]
    full = slope_fit(Ts, vals)
    out = {"full": full, "trimmed": None, "chosen": full}
    if full.r2 < r2_min and len(Ts) > 3:
        trimmed = slope_fit(Ts[1:], vals[1:])
        out["trimmed"] = trimmed
        out["chosen"] = trimmed
    return out


@dataclass(frozen=True)
class RegretReport:
    L_policy: float
    L_hindsight: float
    L_oracle: float
    violation: float
    interval_costs: tuple = ()

    @property
    def R_T(self) -> float:
        return self.L_policy - self.L_hindsight

    @property
    def R_T_base(self) -> float:
        return self.L_policy - self.L_oracle


def regret_report(traj, hindsight_cost: float, oracle_cost: float, U: PolytopeU) -> RegretReport:
    vals = [float(x) for x in (traj.total_cost, hindsight_cost, oracle_cost)]
    if not all(np.isfinite(vals)):
        raise ContractError("costs must be finite")
    ids = np.asarray(traj.interval)
    parts = tuple(float(traj.cost[ids == i].sum()) for i in np.unique(ids))
    return RegretReport(vals[0], vals[1], vals[2], violation(traj, U), parts)
