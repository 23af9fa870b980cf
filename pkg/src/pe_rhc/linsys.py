"""Ground-truth linear system, bounded observation noise and parameter checks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ContractError(ValueError):
    """Raised when an argument violates a dimension or domain contract."""


@dataclass(frozen=True, eq=False)
class SystemParams:
    """True parameters ``theta = [A, B]`` of ``x_{t+1} = A x_t + B u_t``.

    ``S`` bounds the Frobenius norm of ``theta`` over the admissible set.
    Admissibility is reported by :func:`check_admissible`, not enforced here,
    so that unstable or uncontrollable instances can still be inspected.
    """

    A: np.ndarray
    B: np.ndarray
    S: float = np.inf

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 0:
            B = B.reshape(1, 1)
        elif B.ndim == 1:
            B = B.reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ContractError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ContractError(f"B must have {A.shape[0]} rows, got {B.shape}")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "S", float(self.S))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def theta(self) -> np.ndarray:
        return np.hstack([self.A, self.B])

    @classmethod
    def from_theta(cls, theta, n: int, S: float = np.inf) -> "SystemParams":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:, :n], theta[:, n:], S)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """I.i.d. observation noise, uniform on the ball of radius ``eps_c``."""

    eps_c: float = 0.0
    kind: str = "uniform-ball"

    def __post_init__(self):
        if self.eps_c < 0:
            raise ContractError("eps_c must be nonnegative")
        if self.kind not in ("uniform-ball", "zero"):
            raise ContractError(f"unknown noise kind {self.kind!r}")

    @property
    def R(self) -> float:
        # bounded noise of radius eps_c is sub-Gaussian with constant eps_c
        return self.eps_c

    def sample(self, rng: np.random.Generator, n: int, size: int | None = None) -> np.ndarray:
        shape = (n,) if size is None else (size, n)
        if self.kind == "zero" or self.eps_c == 0.0:
            return np.zeros(shape)
        return uniform_ball(rng, self.eps_c, shape)


def uniform_ball(rng: np.random.Generator, radius: float, shape) -> np.ndarray:
    """Uniform samples from the Euclidean ball; the last axis is the vector axis."""
    shape = tuple(np.atleast_1d(shape))
    d = shape[-1]
    g = rng.standard_normal(shape)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    norms[norms == 0.0] = 1.0
    r = rng.random(shape[:-1] + (1,)) ** (1.0 / d)
    return radius * r * g / norms


def step(theta: SystemParams, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape[0] != theta.n or u.shape[0] != theta.m:
        raise ContractError(
            f"expected x in R^{theta.n} and u in R^{theta.m}, got {x.shape} and {u.shape}"
        )
    return theta.A @ x + theta.B @ u


def observe(x, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    return x + noise.sample(rng, x.shape[0])


def spectral_radius(A) -> float:
    A = np.atleast_2d(A)
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def controllability_matrix(A, B) -> np.ndarray:
    A = np.atleast_2d(A)
    blocks = [np.atleast_2d(B).reshape(A.shape[0], -1)]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


@dataclass(frozen=True, eq=False)
class AdmissibilityReport:
    rho: float
    ctrb_rank: int
    fro_norm: float
    n: int
    S: float
    flags: tuple = field(default_factory=tuple)

    @property
    def admissible(self) -> bool:
        return not self.flags


def check_admissible(theta: SystemParams) -> AdmissibilityReport:
    rho = spectral_radius(theta.A)
    C = controllability_matrix(theta.A, theta.B)
    rank = int(np.linalg.matrix_rank(C))
    fro = float(np.linalg.norm(theta.theta))
    flags = []
    if rho >= 1.0:
        flags.append("unstable")
    if rank < theta.n:
        flags.append("uncontrollable")
    if fro > theta.S:
        flags.append("norm-bound")
    return AdmissibilityReport(rho, rank, fro, theta.n, theta.S, tuple(flags))


def power_norm_decay(A, kmax: int = 200) -> tuple[float, float]:
    """Constants ``(c_rho, gamma)`` with ``||A^k||_2 <= c_rho * gamma**k`` for all k.

    Finds the first power ``p`` with ``||A^p|| < 1``, sets
    ``gamma = ||A^p||**(1/p)`` and ``c_rho = max_{r<p} ||A^r|| / gamma**r``;
    the bound then holds for every k by submultiplicativity.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if spectral_radius(A) >= 1.0:
        raise ContractError("power_norm_decay needs a Schur-stable matrix")
    Ak = np.eye(A.shape[0])
    norms = [1.0]
    p = None
    for k in range(1, 100 * kmax + 1):
        Ak = Ak @ A
        nk = np.linalg.norm(Ak, 2)
        norms.append(nk)
        if nk < 1.0:
            p = k
            break
    if p is None:
        raise ContractError("no power of A with norm below one was found")
    gamma = max(norms[p] ** (1.0 / p), 1e-3)
    c_rho = max(norms[r] / gamma**r for r in range(p))
    return float(max(c_rho, 1.0)), float(gamma)


def state_bound(theta: SystemParams, x1, u_max: float) -> float:
    """A priori bound on ``||x_t||`` when ``||u_t|| <= u_max`` for all t."""
    c_rho, gamma = power_norm_decay(theta.A)
    bn = np.linalg.norm(theta.B, 2)
    return c_rho * (float(np.linalg.norm(x1)) + bn * u_max / (1.0 - gamma))


def random_system(
    rng: np.random.Generator,
    n: int,
    m: int,
    rho_max: float = 0.9,
    S: float | None = None,
    max_tries: int = 10_000,
) -> SystemParams:
    """Draw a stable, controllable pair by rejection."""
    for _ in range(max_tries):
        A = rng.uniform(-1.0, 1.0, (n, n))
        rho = spectral_radius(A)
        if rho > 0:
            A *= rng.uniform(0.1, rho_max) / rho
        B = rng.uniform(-1.0, 1.0, (n, m))
        cand = SystemParams(A, B, np.inf if S is None else S)
        if np.linalg.matrix_rank(controllability_matrix(A, B)) < n:
            continue
        if S is not None and np.linalg.norm(cand.theta) > S:
            continue
        if S is None:
            cand = SystemParams(A, B, 1.5 * np.linalg.norm(cand.theta))
        return cand
    raise RuntimeError("could not sample an admissible system")


def load_system(source) -> tuple[SystemParams, NoiseModel, np.ndarray]:
    """Read a system description from a JSON path or an already parsed dict.

    Keys: ``A`` and ``B`` (row-major nested lists), ``eps_c``, ``S`` and an
    optional initial state ``x1`` (zeros when absent).
    """
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    else:
        data = dict(source)
    allowed = {"A", "B", "eps_c", "S", "x1"}
    unknown = set(data) - allowed
    if unknown:
        raise ContractError(f"unknown system keys: {sorted(unknown)}")
    missing = {"A", "B", "eps_c", "S"} - set(data)
    if missing:
        raise ContractError(f"missing system keys: {sorted(missing)}")
    theta = SystemParams(np.array(data["A"], dtype=float), np.array(data["B"], dtype=float), data["S"])
    noise = NoiseModel(float(data["eps_c"]))
    x1 = np.asarray(data.get("x1", np.zeros(theta.n)), dtype=float).reshape(-1)
    if x1.shape[0] != theta.n:
        raise ContractError("x1 has the wrong dimension")
    return theta, noise, x1
