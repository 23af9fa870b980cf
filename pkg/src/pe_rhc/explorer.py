"""Directional input perturbations that keep the input window full rank.

Notation: ``q = (n+1) m``. A window vector stacks ``n+1`` consecutive inputs,
``W_k = [u_k; ...; u_{k+n}]``, and the window matrix holds ``q`` consecutive
window vectors. When ``u_t`` is chosen, the vector ``W_{t-n}`` is completed;
the perturbation is picked so that it is linearly independent of the ``q-1``
most recent completed vectors.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .linsys import ContractError

RANK_TOL = 1e-10
ZERO_TOL = 1e-10
UHAT_TOL = 1e-12


class InputWindow:
    """Ring buffer of the most recent ``q + n`` applied inputs."""

    def __init__(self, n: int, m: int):
        self.n, self.m = n, m
        self.q = (n + 1) * m
        self.dim = (n + 1) * m
        self._u: deque = deque(maxlen=self.q + n)
        self.count = 0

    def push(self, u):
        u = np.asarray(u, dtype=float).reshape(self.m)
        self._u.append(u.copy())
        self.count += 1

    @property
    def inputs(self) -> np.ndarray:
        return np.array(self._u).reshape(-1, self.m)

    @property
    def completed(self) -> int:
        return max(self.count - self.n, 0)

    def columns(self, how_many: int) -> np.ndarray:
        """The last ``how_many`` completed window vectors as a ``dim x k`` matrix."""
        k = min(how_many, self.completed, self.q)
        if k == 0:
            return np.zeros((self.dim, 0))
        U = self.inputs
        nn = self.n + 1
        cols = [U[len(U) - nn - j:len(U) - j].reshape(-1) for j in range(k - 1, -1, -1)]
        return np.array(cols).T

    def window_matrix(self) -> np.ndarray | None:
        if self.completed < self.q:
            return None
        return self.columns(self.q)

    def forming(self) -> np.ndarray | None:
        """Inputs already placed in the vector completed by the next input."""
        if self.count < self.n:
            return None
        if self.n == 0:
            return np.zeros((0, self.m))
        return self.inputs[-self.n:]


def _null_from_columns(C: np.ndarray, n: int, m: int) -> tuple[np.ndarray, bool]:
    dim = (n + 1) * m
    r = C.shape[1]
    if r == 0:
        N = np.eye(dim)
    else:
        Uf, s, _ = np.linalg.svd(C, full_matrices=True)
        if s[-1] <= RANK_TOL * max(s[0], 1.0):
            raise ContractError("the retained window columns are rank deficient")
        N = Uf[:, r:]
    last = N[-m:, :]
    _, _, Vt = np.linalg.svd(last, full_matrices=True)
    w = N @ Vt[0]
    w /= np.linalg.norm(w)
    pivot = np.argmax(np.abs(w))
    if w[pivot] < 0:
        w = -w
    return w, bool(np.linalg.norm(w[-m:]) < ZERO_TOL)


def null_direction(window: InputWindow) -> tuple[np.ndarray, bool]:
    """Unit vector orthogonal to the retained window vectors, and the zero flag.

    The retained vectors are the ``q-1`` most recent completed ones (fewer
    during the first steps of a run, in which case the null space has more
    than one dimension and the vector with the largest final block is used).
    The flag is set when the final ``m``-block is numerically zero.
    """
    C = window.columns(window.q - 1)
    return _null_from_columns(C, window.n, window.m)


def null_direction_from_matrix(M_prev, n: int, m: int) -> tuple[np.ndarray, bool]:
    """Null direction after dropping the oldest column of a full window matrix."""
    M_prev = np.atleast_2d(np.asarray(M_prev, dtype=float))
    if M_prev.shape != ((n + 1) * m, (n + 1) * m):
        raise ContractError("window matrix has the wrong shape")
    if np.linalg.svd(M_prev, compute_uv=False)[-1] <= RANK_TOL:
        raise ContractError("the previous window matrix is rank deficient")
    return _null_from_columns(M_prev[:, 1:], n, m)


def _sign(v: float) -> float:
    return 1.0 if v >= 0 else -1.0


@dataclass(frozen=True)
class PerturbInfo:
    case: str
    g: float
    g_perp: float


def perturb(u_hat, window: InputWindow, c_p: float, return_info: bool = False):
    """Perturbation ``du`` added to ``u_hat`` for the current step."""
    if c_p <= 0:
        raise ContractError("c_p must be positive")
    u_hat = np.asarray(u_hat, dtype=float).reshape(-1)
    m = u_hat.shape[0]
    sq = np.sqrt(c_p)
    nrm = float(np.linalg.norm(u_hat))
    if nrm <= UHAT_TOL * sq:
        # numerically zero nominal input: no usable direction
        nrm = 0.0
        u_hat = np.zeros_like(u_hat)
    e = u_hat / nrm if nrm > 0 else None
    forming = window.forming()

    def out(du, case, g=0.0, gp=0.0):
        return (du, PerturbInfo(case, g, gp)) if return_info else du

    if forming is None:
        # no window vector is completed by this input yet
        d = e if e is not None else np.eye(m)[0]
        return out(sq * d, "pre-window")
    Wp, zero = null_direction(window)
    blocks = Wp.reshape(window.n + 1, m)
    up = blocks[-1]
    g = float(np.sum(blocks[:-1] * forming))
    if zero:
        d = e if e is not None else np.eye(m)[0]
        return out(sq * d, "null-zero", g)
    ep = up / np.linalg.norm(up)
    if e is None:
        e = ep
    g_perp = float(up @ u_hat)
    if g_perp == 0.0:
        return out(_sign(g) * sq * ep, "perp", g, g_perp)
    tot = g_perp + g
    gs = (np.sign(tot)) * np.sign(g_perp)
    if gs < 0 and abs(nrm - sq) >= sq:
        return out(gs * sq * e, "flip", g, g_perp)
    if gs < 0:
        return out(2.0 * gs * sq * e, "flip2", g, g_perp)
    return out(sq * e, "align", g, g_perp)


@dataclass(frozen=True)
class ExcitationReport:
    interval: int
    lambda_min: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.lambda_min >= self.bound


def check_poe(Z=None, gamma: float = 1.0, c_p_i: float = 1.0, t_i: int = 1, interval: int = 0,
              V=None) -> ExcitationReport:
    """Smallest eigenvalue of ``sum z z'`` over the first ``t_i`` regressors against ``gamma c_p t_i``."""
    if V is None:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if len(Z) < t_i:
            raise ContractError("history is shorter than t_i")
        Z = Z[:t_i]
        V = Z.T @ Z
    V = np.asarray(V, dtype=float)
    lam = float(np.linalg.eigvalsh(0.5 * (V + V.T))[0])
    return ExcitationReport(interval, lam, gamma * c_p_i * t_i)


def periodic_excitation_input(t: int, n: int, m: int, scale: float = 1.0) -> np.ndarray:
    if t < 1:
        raise ContractError("time indices start at 1")
    u = np.zeros(m)
    for j in range(m, 0, -1):
        if (t - 1) % ((n + 1) * j) == 0:
            u[j - 1] = scale
            break
    return u


def window_vectors(U, n: int) -> np.ndarray:
    """All complete window vectors of an input sequence, one per row."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    k = len(U) - n
    if k <= 0:
        return np.zeros((0, U.shape[1] * (n + 1)))
    return np.stack([U[i:i + n + 1].reshape(-1) for i in range(k)])
