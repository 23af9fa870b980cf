"""Finite-horizon constrained optimal control over an input polytope.

The horizon problem at time ``t0`` from state ``x0`` is

    min_W  sum_{k=0}^{M-1} c_{t0+k}(x_k, w_k) + Gamma d(x_M)
    s.t.   x_{k+1} = A x_k + B w_k,  w_k in U,  x_0 = x0.

States are eliminated through the linear dynamics, so every backend works
on the stacked input vector ``W`` only. Quadratic costs with a small stacked
dimension use an explicit condensed Hessian; everything else uses a chunked
forward rollout and backward adjoint pass. Both feed the same monotone
accelerated projected-gradient loop.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linprog

from .costs import StageCostSpec, TerminalCostSpec
from .linsys import ContractError, SystemParams

GRAD_TOL = 1e-8
MAX_ITER = 10_000
DENSE_LIMIT = 512
TIE_REG = 1e-12
FEAS_TOL = 1e-8


class SolverError(RuntimeError):
    """Raised when a horizon solve does not produce a usable input."""

    def __init__(self, message: str, status: str = "infeasible"):
        super().__init__(message)
        self.status = status


# ---------------------------------------------------------------------------
# input polytope
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolytopeU:
    """``U = {u : F u <= b}`` with an optional axis-aligned box shortcut."""

    F: np.ndarray
    b: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    is_empty: bool = field(default=False, init=False)
    radius: float = field(default=np.inf, init=False)

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if F.shape[0] != b.shape[0]:
            raise ContractError("F and b disagree on the number of rows")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "b", b)
        if self.lo is not None:
            object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(-1))
            object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(-1))
        empty, radius = self._bounds()
        object.__setattr__(self, "is_empty", empty)
        if not empty and not np.isfinite(radius):
            raise ContractError("the input polytope must be bounded")
        object.__setattr__(self, "radius", radius)

    @classmethod
    def from_box(cls, lo, hi, m: int | None = None) -> "PolytopeU":
        lo = np.asarray(lo, dtype=float).reshape(-1)
        hi = np.asarray(hi, dtype=float).reshape(-1)
        if m is not None:
            lo = np.broadcast_to(lo, (m,)).copy()
            hi = np.broadcast_to(hi, (m,)).copy()
        if lo.shape != hi.shape:
            raise ContractError("box bounds differ in shape")
        eye = np.eye(lo.shape[0])
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]), lo, hi)

    @property
    def m(self) -> int:
        return self.F.shape[1]

    @property
    def is_box(self) -> bool:
        return self.lo is not None

    def _bounds(self) -> tuple[bool, float]:
        if self.is_box:
            if np.any(self.lo > self.hi):
                return True, np.inf
            return False, float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))
        m = self.m
        if m <= 3:
            verts = self.vertices()
            if verts is None:
                return self._bounds_lp()
            if len(verts) == 0:
                return True, np.inf
            if not self._recession_trivial():
                return False, np.inf
            return False, float(np.max(np.linalg.norm(verts, axis=1)))
        return self._bounds_lp()

    def _recession_trivial(self) -> bool:
        """True when ``F d <= 0`` admits only ``d = 0`` (vertices alone miss unbounded rays)."""
        m = self.m
        for i in range(m):
            for sgn in (1.0, -1.0):
                c = np.zeros(m)
                c[i] = -sgn
                res = linprog(c, A_ub=self.F, b_ub=np.zeros(len(self.b)), bounds=[(-1, 1)] * m, method="highs")
                if res.status == 0 and -res.fun > 1e-9:
                    return False
        return True

    def _bounds_lp(self) -> tuple[bool, float]:
        m = self.m
        ext = np.zeros(m)
        for i in range(m):
            for sgn in (1.0, -1.0):
                c = np.zeros(m)
                c[i] = -sgn
                res = linprog(c, A_ub=self.F, b_ub=self.b, bounds=[(None, None)] * m, method="highs")
                if res.status == 2:
                    return True, np.inf
                if res.status == 3:
                    return False, np.inf
                ext[i] = max(ext[i], abs(res.x[i]))
        return False, float(np.linalg.norm(ext))

    def vertices(self):
        """Vertices by enumerating ``m``-row subsets (small ``m`` only).

        Returns ``None`` when no subset is regular, which happens for
        unbounded sets.
        """
        m = self.m
        found = []
        regular = False
        for rows in itertools.combinations(range(self.F.shape[0]), m):
            Fs = self.F[list(rows)]
            if abs(np.linalg.det(Fs)) < 1e-12:
                continue
            regular = True
            v = np.linalg.solve(Fs, self.b[list(rows)])
            if np.all(self.F @ v <= self.b + 1e-9):
                found.append(v)
        if not regular:
            return None
        if not found:
            # a bounded polytope with m rows independent but no vertex is empty
            res = linprog(np.zeros(m), A_ub=self.F, b_ub=self.b, bounds=[(None, None)] * m, method="highs")
            return [] if res.status == 2 else None
        return np.array(found)

    def violation(self, u) -> np.ndarray:
        """Summed positive part of ``F u - b``; accepts one input or a batch."""
        u = np.asarray(u, dtype=float)
        return np.maximum(u @ self.F.T - self.b, 0.0).sum(axis=-1)

    def contains(self, u, tol: float = FEAS_TOL) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u @ self.F.T <= self.b + tol))


def project_polytope(u, U: PolytopeU, tol: float = 1e-10, max_cycles: int = 100_000) -> np.ndarray:
    """Euclidean projection onto ``U``; rows of a 2-D ``u`` are projected independently.

    Boxes are clipped exactly. General polytopes use Dykstra's alternating
    projections over the half-spaces, run on all rows at once.
    """
    if U.is_empty:
        raise SolverError("cannot project onto an empty polytope")
    u = np.asarray(u, dtype=float)
    if U.is_box:
        return np.clip(u, U.lo, U.hi)
    X = np.atleast_2d(u).copy()
    if np.all(X @ U.F.T <= U.b + tol):
        return X.reshape(u.shape)
    F, b = U.F, U.b
    norms2 = np.einsum("ij,ij->i", F, F)
    incr = np.zeros((F.shape[0],) + X.shape)
    for _ in range(max_cycles):
        X_prev = X.copy()
        for i in range(F.shape[0]):
            Y = X + incr[i]
            excess = np.maximum(Y @ F[i] - b[i], 0.0)
            X = Y - np.outer(excess / norms2[i], F[i])
            incr[i] = Y - X
        viol = np.max(X @ F.T - b)
        if viol <= tol and np.max(np.abs(X - X_prev)) <= tol:
            return X.reshape(u.shape)
    raise SolverError("Dykstra projection exceeded its iteration budget", status="max-iter")


# ---------------------------------------------------------------------------
# problem and result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HorizonProblem:
    theta_hat: SystemParams
    x0: np.ndarray
    t0: int
    M: int
    costs: StageCostSpec
    terminal: TerminalCostSpec | None
    constraint: PolytopeU
    preview_end: int | None = None

    def __post_init__(self):
        if self.M < 1:
            raise ContractError("horizon M must be at least 1")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape[0] != self.theta_hat.n:
            raise ContractError("x0 has the wrong dimension")
        if self.constraint.m != self.theta_hat.m:
            raise ContractError("constraint dimension differs from the input dimension")
        object.__setattr__(self, "x0", x0)

    @property
    def times(self) -> np.ndarray:
        ts = self.t0 + np.arange(self.M)
        if self.preview_end is not None:
            # costs past the preview end are unknown; reuse the last known one
            ts = np.minimum(ts, max(self.preview_end, self.t0))
        return ts


@dataclass(frozen=True, eq=False)
class ControlSequence:
    U: np.ndarray
    value: float
    status: str
    iterations: int = 0
    residual: float = 0.0

    def __len__(self):
        return len(self.U)


def first_input(seq: ControlSequence, allow_inexact: bool = False) -> np.ndarray:
    if seq.status == "converged" or (allow_inexact and seq.status == "max-iter"):
        return seq.U[0].copy()
    raise SolverError(f"horizon solve ended with status {seq.status!r}", status=seq.status)


# ---------------------------------------------------------------------------
# dynamics condensation
# ---------------------------------------------------------------------------


def prediction_matrices(A, B, M: int) -> tuple[np.ndarray, np.ndarray]:
    """``Phi`` (M n x n) and ``G`` (M n x M m) with ``[x_1; ..; x_M] = Phi x_0 + G W``."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    n, m = B.shape
    powers = [np.eye(n)]
    for _ in range(M):
        powers.append(A @ powers[-1])
    Phi = np.vstack(powers[1:])
    blocks = [P @ B for P in powers[:M]]
    G = np.zeros((M * n, M * m))
    for k in range(M):
        for j in range(k + 1):
            G[k * n:(k + 1) * n, j * m:(j + 1) * m] = blocks[k - j]
    return Phi, G


class _Dense:
    """Stacked rollout through explicit prediction matrices."""

    def __init__(self, Phi, G, n, m, M):
        self.Phi, self.G, self.n, self.m, self.M = Phi, G, n, m, M

    def states(self, x0, W):
        return (self.Phi @ x0 + self.G @ W.reshape(-1)).reshape(self.M, self.n)

    def adjoint(self, gX):
        return (self.G.T @ gX.reshape(-1)).reshape(self.M, self.m)


class _Chunked:
    """Rollout in chunks of ``L`` steps, each through a small prediction block."""

    def __init__(self, A, B, M, L):
        self.n, self.m = np.atleast_2d(B).shape
        self.M, self.L = M, L
        self.Phi, self.G = prediction_matrices(A, B, L)

    def states(self, x0, W):
        n, L = self.n, self.L
        X = np.empty((self.M, n))
        x = x0
        for s in range(0, self.M, L):
            k = min(L, self.M - s)
            blk = self.Phi[: k * n] @ x + self.G[: k * n, : k * self.m] @ W[s:s + k].reshape(-1)
            X[s:s + k] = blk.reshape(k, n)
            x = X[s + k - 1]
        return X

    def adjoint(self, gX):
        n, m, L = self.n, self.m, self.L
        gW = np.empty((self.M, m))
        mu = np.zeros(n)
        starts = list(range(0, self.M, L))
        for s in reversed(starts):
            k = min(L, self.M - s)
            D = gX[s:s + k].copy()
            D[-1] += mu
            Dv = D.reshape(-1)
            gW[s:s + k] = (self.G[: k * n, : k * m].T @ Dv).reshape(k, m)
            mu = self.Phi[: k * n].T @ Dv
        return gW


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


class RHCSolver:
    """Horizon solver with per-model caches; one instance per run."""

    def __init__(self, grad_tol: float = GRAD_TOL, max_iter: int = MAX_ITER, multistart: bool = True):
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.multistart = multistart
        self._pred: dict = {}
        self._qp: dict = {}

    # caches -------------------------------------------------------------
    def _model_key(self, theta: SystemParams) -> bytes:
        return theta.A.tobytes() + theta.B.tobytes()

    def _rollout(self, theta: SystemParams, M: int):
        key = (self._model_key(theta), M)
        ro = self._pred.get(key)
        if ro is None:
            n, m = theta.n, theta.m
            if M * max(n, m) <= DENSE_LIMIT:
                Phi, G = prediction_matrices(theta.A, theta.B, M)
                ro = _Dense(Phi, G, n, m, M)
            else:
                L = max(1, min(M, 256 // max(n, m)))
                ro = _Chunked(theta.A, theta.B, M, L)
            if len(self._pred) > 64:
                self._pred.clear()
            self._pred[key] = ro
        return ro

    def _quadratic(self, p: HorizonProblem, ro: _Dense):
        ts = p.times
        phase_key = tuple(np.atleast_1d(p.costs.index(ts)).tolist())
        Gamma = 0.0 if p.terminal is None else p.terminal.Gamma
        key = (self._model_key(p.theta_hat), p.M, id(p.costs), id(p.terminal), Gamma, phase_key)
        qp = self._qp.get(key)
        if qp is None:
            n, m, M = p.theta_hat.n, p.theta_hat.m, p.M
            Qs, Rs = p.costs.quadratic_blocks(ts)
            Qbar = np.zeros((M * n, M * n))
            for k in range(1, M):
                Qbar[(k - 1) * n:k * n, (k - 1) * n:k * n] = Qs[k]
            if p.terminal is not None:
                Qbar[(M - 1) * n:, (M - 1) * n:] = p.terminal.Gamma * p.terminal.P
            Rbar = np.zeros((M * m, M * m))
            for k in range(M):
                Rbar[k * m:(k + 1) * m, k * m:(k + 1) * m] = Rs[k]
            GtQ = ro.G.T @ Qbar
            H = 2.0 * (Rbar + GtQ @ ro.G)
            H = 0.5 * (H + H.T) + 2.0 * TIE_REG * np.eye(M * m)
            L = float(np.linalg.eigvalsh(H)[-1])
            qp = {"H": H, "chol": cho_factor(H), "GtQ": GtQ, "Qbar": Qbar, "L": L, "Q0": Qs[0]}
            if len(self._qp) > 256:
                self._qp.clear()
            self._qp[key] = qp
        return qp

    # public ---------------------------------------------------------------
    def solve(self, p: HorizonProblem, warm=None) -> ControlSequence:
        if p.constraint.is_empty:
            return ControlSequence(np.full((p.M, p.theta_hat.m), np.nan), np.inf, "infeasible")
        ro = self._rollout(p.theta_hat, p.M)
        if p.costs.family == "quadratic" and isinstance(ro, _Dense):
            return self._solve_qp(p, ro, warm)
        return self._solve_general(p, ro, warm)

    def _solve_qp(self, p: HorizonProblem, ro: _Dense, warm) -> ControlSequence:
        qp = self._quadratic(p, ro)
        r = ro.Phi @ p.x0
        if p.terminal is not None and np.any(p.terminal.center):
            r = r.copy()
            r[-p.theta_hat.n:] -= p.terminal.center
        f = 2.0 * (qp["GtQ"] @ r)
        const = float(p.x0 @ qp["Q0"] @ p.x0 + r @ qp["Qbar"] @ r)
        H = qp["H"]
        m = p.theta_hat.m

        def value(W):
            return float(0.5 * W @ H @ W + f @ W) + const - TIE_REG * float(W @ W)

        W_star = -cho_solve(qp["chol"], f)
        if p.constraint.contains(W_star.reshape(p.M, m), tol=0.0):
            return ControlSequence(W_star.reshape(p.M, m), value(W_star), "converged", 0, 0.0)

        def obj_grad(W):
            HW = H @ W
            return float(0.5 * W @ HW + f @ W) + const, HW + f

        proj = lambda W: project_polytope(W.reshape(p.M, m), p.constraint).reshape(-1)
        start = proj(W_star) if warm is None else proj(np.asarray(warm, dtype=float).reshape(-1))
        W, val, it, res, status = _mfista(obj_grad, proj, start, qp["L"], self.grad_tol * (1.0 + np.linalg.norm(f)),
                                          self.max_iter, fixed_step=True)
        val -= TIE_REG * float(W @ W)
        return ControlSequence(W.reshape(p.M, m), val, status, it, res)

    def _objective(self, p: HorizonProblem, ro):
        ts = p.times
        costs, term = p.costs, p.terminal
        n, m, M = p.theta_hat.n, p.theta_hat.m, p.M

        def obj_grad(Wv):
            W = Wv.reshape(M, m)
            Xn = ro.states(p.x0, W)
            X = np.vstack([p.x0[None, :], Xn[:-1]])
            vals, gx, gu = costs.terms(ts, X, W)
            total = float(vals.sum())
            gX = np.zeros((M, n))
            gX[:-1] = gx[1:]
            if term is not None:
                total += term.value(Xn[-1])
                gX[-1] = term.grad(Xn[-1])
            total += TIE_REG * float(Wv @ Wv)
            g = ro.adjoint(gX) + gu + 2.0 * TIE_REG * W
            return total, g.reshape(-1)

        return obj_grad

    def _solve_general(self, p: HorizonProblem, ro, warm) -> ControlSequence:
        m, M = p.theta_hat.m, p.M
        obj_grad = self._objective(p, ro)
        proj = lambda W: project_polytope(W.reshape(M, m), p.constraint).reshape(-1)
        zero = proj(np.zeros(M * m))
        starts = [zero if warm is None else proj(np.asarray(warm, dtype=float).reshape(-1))]
        if self.multistart and not p.costs.convex:
            starts.append(zero)
            starts.append(proj(_surrogate_start(p, ro)))
        L0 = 1.0
        if p.costs.family == "quadratic":
            L0 = _power_lipschitz(obj_grad, M * m)
        best = None
        tol = self.grad_tol * (1.0 + np.linalg.norm(obj_grad(np.zeros(M * m))[1]))
        for s in starts:
            W, val, it, res, status = _mfista(obj_grad, proj, s, L0, tol, self.max_iter,
                                              fixed_step=p.costs.family == "quadratic")
            if best is None or val < best[1]:
                best = (W, val, it, res, status)
        W, val, it, res, status = best
        val -= TIE_REG * float(W @ W)
        return ControlSequence(W.reshape(M, m), val, status, it, res)


def _power_lipschitz(obj_grad, dim: int, iters: int = 60) -> float:
    """Largest Hessian eigenvalue of a quadratic objective by power iteration."""
    g0 = obj_grad(np.zeros(dim))[1]
    v = np.random.default_rng(0).standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        Hv = obj_grad(v)[1] - g0
        lam_new = float(np.linalg.norm(Hv))
        if lam_new == 0.0:
            return 1.0
        v = Hv / lam_new
        if abs(lam_new - lam) <= 1e-6 * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return 1.05 * lam


def _surrogate_start(p: HorizonProblem, ro, max_iter: int = 500) -> np.ndarray:
    """Unconstrained minimizer of a unit-weight quadratic stand-in for the stage cost.

    Used as a starting point for nonconvex costs, whose cusp at the origin
    traps descent started from zero.
    """
    n, m, M = p.theta_hat.n, p.theta_hat.m, p.M
    target = np.zeros((M, n))
    if p.costs.family == "tracking":
        target = p.costs.b[p.costs.index(p.times)]

    def obj_grad(Wv):
        W = Wv.reshape(M, m)
        D = ro.states(p.x0, W) - target
        g = ro.adjoint(2.0 * D) + 2.0 * W
        return float(np.sum(D * D) + Wv @ Wv), g.reshape(-1)

    W0 = np.zeros(M * m)
    W = _mfista(obj_grad, lambda v: v, W0, 1.0, 1e-8 * (1.0 + np.linalg.norm(obj_grad(W0)[1])), max_iter,
                fixed_step=False)[0]
    return W


def _mfista(obj_grad, proj, W0, L, tol, max_iter, fixed_step):
    """Monotone FISTA with gradient-based restart.

    Stops when the gradient mapping ``L (W - P(W - g/L))`` has norm at most
    ``tol``. With ``fixed_step`` the step is ``1/L`` for a known Lipschitz
    constant; otherwise ``L`` is found by backtracking.
    """
    W = proj(np.asarray(W0, dtype=float))
    fW, gW = obj_grad(W)
    Y, fY, gY = W, fW, gW
    tk = 1.0
    res = np.inf
    for it in range(1, max_iter + 1):
        while True:
            Z = proj(Y - gY / L)
            fZ, gZ = obj_grad(Z)
            if fixed_step:
                break
            d = Z - Y
            if fZ <= fY + gY @ d + 0.5 * L * (d @ d) + 1e-12 * abs(fY):
                break
            L *= 2.0
        if fZ <= fW:
            W_new, f_new, g_new = Z, fZ, gZ
        else:
            W_new, f_new, g_new = W, fW, gW
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        Y_new = W_new + (tk / t_next) * (Z - W_new) + ((tk - 1.0) / t_next) * (W_new - W)
        if (Y - Z) @ (Z - W) > 0:
            # momentum points uphill: restart from the current iterate
            Y_new, t_next = W_new, 1.0
        res = float(np.linalg.norm(W_new - proj(W_new - g_new / L)) * L)
        W, fW, gW = W_new, f_new, g_new
        if res <= tol:
            return W, fW, it, res, "converged"
        if Y_new is W:
            Y, fY, gY = W, fW, gW
        else:
            Y = Y_new
            fY, gY = obj_grad(Y)
        tk = t_next
        if not fixed_step:
            L = max(L / 1.5, 1e-12)
    return W, fW, max_iter, res, "max-iter"


def kkt_residual(p: HorizonProblem, seq: ControlSequence, solver: RHCSolver | None = None) -> float:
    """Norm of the projected-gradient optimality residual at the returned sequence."""
    solver = solver or RHCSolver()
    ro = solver._rollout(p.theta_hat, p.M)
    obj_grad = solver._objective(p, ro)
    W = seq.U.reshape(-1)
    g = obj_grad(W)[1]
    proj = project_polytope((W - g).reshape(p.M, p.theta_hat.m), p.constraint).reshape(-1)
    return float(np.linalg.norm(W - proj))


_DEFAULT = None


def solve_horizon(problem: HorizonProblem, warm=None, solver: RHCSolver | None = None) -> ControlSequence:
    global _DEFAULT
    if solver is None:
        if _DEFAULT is None:
            _DEFAULT = RHCSolver()
        solver = _DEFAULT
    return solver.solve(problem, warm)


def shift_warm(seq: ControlSequence | None):
    """Previous solution advanced one step, repeating the last input."""
    if seq is None or not np.all(np.isfinite(seq.U)):
        return None
    return np.vstack([seq.U[1:], seq.U[-1:]])
