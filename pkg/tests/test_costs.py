import numpy as np
import pytest

from pe_rhc.costs import (
    StageCostSpec,
    TerminalCostSpec,
    box_corners,
    eval_sigma,
    eval_stage,
    lipschitz_estimate,
    lyapunov_margin,
    quadratic_constants,
    required_gamma,
    synth_terminal,
    terminal_decrease_gap,
    verify_assumption3,
)
from pe_rhc.linsys import ContractError, SystemParams


def test_quadratic_stage():
    assert eval_stage(StageCostSpec.quadratic(1.0, 1.0), 1, [2.0], [3.0]) == pytest.approx(13.0)


def test_power_stage():
    assert eval_stage(StageCostSpec.power(1.0), 1, [3.0, 4.0], [0.0]) == pytest.approx(5.0)


def test_tracking_stage():
    spec = StageCostSpec.tracking(1.0, 2.0)
    assert eval_stage(spec, 1, [3.0], [17.0]) == pytest.approx(4.0)


def test_sigma_values():
    assert eval_sigma(StageCostSpec.quadratic(np.eye(2), 1.0), [1.0, 1.0]) == pytest.approx(2.0)
    assert eval_sigma(StageCostSpec.tracking([1.0, 2.0], 1.5), [1.0, 2.0]) == 0.0
    assert eval_sigma(StageCostSpec.power(3.0), [2.0]) == pytest.approx(8.0)


def test_schedules():
    Q = np.array([[[1.0]], [[2.0]], [[3.0]]])
    R = np.ones((3, 1, 1))
    periodic = StageCostSpec("quadratic", "periodic", Q=Q, R=R)
    assert [eval_stage(periodic, t, [1.0], [0.0]) for t in (1, 2, 3, 4, 5)] == [1, 2, 3, 1, 2]
    listed = StageCostSpec("quadratic", "list", Q=Q, R=R)
    assert eval_stage(listed, 3, [1.0], [0.0]) == 3.0
    with pytest.raises(ContractError):
        eval_stage(listed, 4, [1.0], [0.0])
    with pytest.raises(ContractError):
        eval_stage(listed, 0, [1.0], [0.0])


def test_invalid_parameters():
    with pytest.raises(ContractError):
        StageCostSpec.quadratic(1.0, 0.0)
    with pytest.raises(ContractError):
        StageCostSpec.quadratic(-1.0, 1.0)
    with pytest.raises(ContractError):
        StageCostSpec.power(0.0)
    with pytest.raises(ContractError):
        StageCostSpec("cubic")


def test_gradients_match_finite_differences(rng):
    specs = [StageCostSpec.quadratic(np.diag([1.0, 2.0]), [[0.5]]), StageCostSpec.power(1.5),
             StageCostSpec.tracking([0.3, -0.2], 2.5)]
    X = rng.standard_normal((5, 2))
    Uu = rng.standard_normal((5, 1))
    ts = np.arange(1, 6)
    h = 1e-6
    for spec in specs:
        _, gx, gu = spec.terms(ts, X, Uu)
        for j in range(2):
            E = np.zeros_like(X)
            E[:, j] = h
            fd = (spec.terms(ts, X + E, Uu, grad=False)[0] - spec.terms(ts, X - E, Uu, grad=False)[0]) / (2 * h)
            np.testing.assert_allclose(gx[:, j], fd, rtol=1e-5, atol=1e-7)
        fd = (spec.terms(ts, X, Uu + h, grad=False)[0] - spec.terms(ts, X, Uu - h, grad=False)[0]) / (2 * h)
        np.testing.assert_allclose(gu[:, 0], fd, rtol=1e-5, atol=1e-7)


def test_synth_terminal_scalar():
    term = synth_terminal([0.5])
    assert term.P[0, 0] == pytest.approx(8.0 / 3.0)
    assert 0.25 * term.P[0, 0] - term.P[0, 0] == pytest.approx(-2.0)


def test_synth_terminal_zero():
    term = synth_terminal([np.zeros((2, 2))])
    np.testing.assert_allclose(term.P, 2 * np.eye(2))


def test_synth_terminal_two_corners():
    term = synth_terminal([0.3, 0.6])
    P = term.P[0, 0]
    for a in (0.3, 0.6):
        assert -(a * a * P - P) >= 1.0 - 1e-8


def test_synth_terminal_matrix_corners(rng):
    theta = SystemParams([[0.5, 0.2], [-0.1, 0.4]], [[1.0], [0.0]])
    corners = box_corners(theta, 0.05)
    term = synth_terminal(corners)
    for A in corners:
        assert lyapunov_margin(A, term.P) >= 1.0 - 1e-8


def test_synth_terminal_rejects_unstable():
    with pytest.raises(ContractError):
        synth_terminal([1.2])


def test_terminal_invariants():
    term = TerminalCostSpec(np.diag([2.0, 3.0]), Gamma=1.5)
    x = np.array([1.0, -1.0])
    assert term.d(x) == pytest.approx(5.0)
    assert term.d(x) >= term.alpha_d * (x @ x)
    assert term.value(x) == pytest.approx(7.5)
    with pytest.raises(ContractError):
        TerminalCostSpec(np.eye(2), Gamma=0.5)
    with pytest.raises(ContractError):
        TerminalCostSpec(-np.eye(2))


def test_assumption3_quadratic(rng):
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    rep = verify_assumption3(StageCostSpec.quadratic(Q, 1.0), rng, 2, 1, alpha=np.linalg.eigvalsh(Q)[0])
    assert rep.alpha_hat >= np.linalg.eigvalsh(Q)[0] - 1e-12
    assert not rep.flagged


def test_assumption3_power(rng):
    rep = verify_assumption3(StageCostSpec.power(0.7), rng, 3, 2, alpha=1.0)
    assert rep.alpha_hat >= 1.0 - 1e-12


def test_assumption3_flags_bad_alpha(rng):
    rep = verify_assumption3(StageCostSpec.quadratic(np.eye(2), 1.0), rng, 2, 1, alpha=5.0)
    assert rep.flagged


def test_assumption3_tracking_guard(rng):
    # samples at x = b have sigma = 0 and are excluded rather than divided by
    spec = StageCostSpec.tracking([0.0], 2.0)
    rep = verify_assumption3(spec, rng, 1, 1, n_samples=50)
    assert np.isfinite(rep.alpha_hat)


def test_lipschitz_bound_holds(rng):
    spec = StageCostSpec.quadratic(np.eye(2), 1.0)
    L = lipschitz_estimate(spec, rng, 2, 1, 2.0, 1.0)
    X = rng.uniform(-2, 2, (500, 2))
    Uu = rng.uniform(-1, 1, (500, 1))
    X2 = np.clip(X + 0.01 * rng.standard_normal(X.shape), -2, 2)
    ts = np.ones(500, dtype=int)
    diff = np.abs(spec.terms(ts, X, Uu, grad=False)[0] - spec.terms(ts, X2, Uu, grad=False)[0])
    # gradient norm on this domain is at most 2 * 2 * sqrt(2)
    assert L <= 4 * np.sqrt(2) + 1e-9
    assert np.all(diff <= 4 * np.sqrt(2) * np.linalg.norm(X - X2, axis=1) + 1e-12)


def test_terminal_decrease(rng):
    theta = SystemParams(0.7, 1.0)
    term = synth_terminal([0.7])
    assert terminal_decrease_gap(term, theta, [0.0], rng) <= 0.0


def test_terminal_decrease_tracking(rng):
    # tracking system: x_{t+1} = beta x + (1 - beta) b keeps d decreasing about b
    beta, b = 0.6, 2.0
    theta = SystemParams(beta, 1.0)
    term = TerminalCostSpec(synth_terminal([beta]).P, center=[b])
    assert terminal_decrease_gap(term, theta, [b * (1 - beta)], rng) <= 1e-12


def test_required_gamma():
    term = synth_terminal([0.5])
    consts = quadratic_constants(StageCostSpec.quadratic(2.0, 1.0), term)
    assert consts["alpha"] == 2.0 and consts["alpha_d"] == pytest.approx(8.0 / 3.0)
    assert required_gamma(1.0, 1.0, 2.0, 8.0 / 3.0) == 1.0
    assert required_gamma(4.0, 3.0, 1.0, 2.0) == pytest.approx(6.0)
