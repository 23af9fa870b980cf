import numpy as np
import pytest

import pe_rhc.explorer as explorer
from pe_rhc.explorer import (
    InputWindow,
    check_poe,
    null_direction,
    null_direction_from_matrix,
    periodic_excitation_input,
    perturb,
    window_vectors,
)
from pe_rhc.linsys import ContractError


def test_null_direction_identity_example():
    w, zero = null_direction_from_matrix(np.eye(2), 0, 2)
    np.testing.assert_allclose(np.abs(w), [1.0, 0.0], atol=1e-12)
    assert not zero


def test_null_direction_orthogonal_matrix(rng):
    for n, m in [(1, 1), (1, 2), (2, 1)]:
        d = (n + 1) * m
        Qm, _ = np.linalg.qr(rng.standard_normal((d, d)))
        w, _ = null_direction_from_matrix(Qm, n, m)
        assert abs(abs(w @ Qm[:, 0]) - 1.0) <= 1e-10


def test_null_direction_from_matrix_errors():
    with pytest.raises(ContractError):
        null_direction_from_matrix(np.zeros((2, 2)), 0, 2)
    with pytest.raises(ContractError):
        null_direction_from_matrix(np.eye(3), 0, 2)


def test_null_direction_orthogonality(rng):
    n, m = 2, 2
    win = InputWindow(n, m)
    for u in rng.standard_normal((30, m)):
        win.push(u)
        if win.completed >= win.q - 1:
            w, _ = null_direction(win)
            C = win.columns(win.q - 1)
            assert np.max(np.abs(w @ C)) <= 1e-10
            assert np.linalg.norm(w) == pytest.approx(1.0)


def test_null_zero_flag():
    # n=1, m=1, retained column (0, 1): the null vector is (1, 0) with empty final block
    win = InputWindow(1, 1)
    win.push([0.0])
    win.push([1.0])
    w, zero = null_direction(win)
    assert zero
    du = perturb([0.3], win, 0.25)
    np.testing.assert_allclose(du, [0.5])


def _window_with_forming(n, m, forming):
    win = InputWindow(n, m)
    for u in np.atleast_2d(forming):
        win.push(u)
    return win


def test_perturb_perp_row(monkeypatch):
    win = _window_with_forming(1, 2, [np.sqrt(2.0), 0.0])
    wp = np.array([1.0, 0.0, 1.0, 0.0]) / np.sqrt(2.0)
    monkeypatch.setattr(explorer, "null_direction", lambda w: (wp, False))
    du, info = perturb([0.0, 3.0], win, 0.25, return_info=True)
    assert info.case == "perp"
    assert info.g == pytest.approx(1.0)
    np.testing.assert_allclose(du, [0.5, 0.0])


def test_perturb_null_flag_any_direction(monkeypatch):
    win = _window_with_forming(1, 2, [1.0, 0.0])
    monkeypatch.setattr(explorer, "null_direction", lambda w: (np.array([1.0, 0, 0, 0]), True))
    du = perturb([0.0, 2.0], win, 0.04)
    np.testing.assert_allclose(du, [0.0, 0.2])


def test_perturb_align_row(monkeypatch):
    win = _window_with_forming(1, 1, [1.0])
    monkeypatch.setattr(explorer, "null_direction", lambda w: (np.array([1.0, 1.0]) / np.sqrt(2), False))
    du, info = perturb([0.7], win, 0.09, return_info=True)
    assert info.case == "align"
    np.testing.assert_allclose(du, [0.3])
    up = 1 / np.sqrt(2)
    assert np.sign(info.g + up * (0.7 + du[0])) == np.sign(info.g + info.g_perp)


@pytest.mark.parametrize("u_hat,case,scale", [(-3.0, "flip", 1.0), (-0.2, "flip2", 2.0)])
def test_perturb_flip_rows(monkeypatch, u_hat, case, scale):
    # g = 5 dominates g_perp < 0, so g_s = -1
    win = _window_with_forming(1, 1, [5.0 * np.sqrt(2)])
    monkeypatch.setattr(explorer, "null_direction", lambda w: (np.array([1.0, 1.0]) / np.sqrt(2), False))
    c_p = 0.25
    du, info = perturb([u_hat], win, c_p, return_info=True)
    assert info.case == case
    e = np.sign(u_hat)
    np.testing.assert_allclose(du, [-scale * 0.5 * e])


def test_perturb_full_rank_condition_random(rng):
    """The new window vector keeps a nonzero component along the null direction."""
    for _ in range(300):
        n, m = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        win = InputWindow(n, m)
        for u in rng.standard_normal((int(rng.integers(n, 3 * (n + 1) * m)), m)):
            win.push(u)
        c_p = float(rng.uniform(0.01, 1.0))
        u_hat = rng.standard_normal(m) * rng.choice([0.01, 1.0, 10.0])
        wp, zero = null_direction(win)
        du = perturb(u_hat, win, c_p)
        assert np.linalg.norm(du) == pytest.approx(np.sqrt(c_p)) or np.linalg.norm(du) == pytest.approx(2 * np.sqrt(c_p))
        if zero:
            continue
        blocks = wp.reshape(n + 1, m)
        new = np.concatenate([win.forming().reshape(-1), u_hat + du])
        assert abs(wp @ new) > 0.0
        g = float(np.sum(blocks[:-1] * win.forming()))
        gp = float(blocks[-1] @ u_hat)
        if gp != 0.0 and g + gp != 0.0:
            assert np.sign(wp @ new) == np.sign(g + gp)


def test_perturb_zero_uhat_uses_null_direction():
    win = InputWindow(1, 1)
    win.push([1.0])
    win.push([1.0])
    du, info = perturb([0.0], win, 0.25, return_info=True)
    assert info.case == "perp"
    assert abs(du[0]) == pytest.approx(0.5)


def test_perturb_underflow_uhat():
    win = InputWindow(1, 1)
    win.push([1.0])
    win.push([1.0])
    assert np.allclose(perturb([1e-170], win, 0.25), perturb([0.0], win, 0.25))


def test_perturb_pre_window():
    win = InputWindow(2, 1)
    np.testing.assert_allclose(perturb([-2.0], win, 0.25), [-0.5])
    np.testing.assert_allclose(perturb([0.0], win, 0.25), [0.5])
    with pytest.raises(ContractError):
        perturb([0.0], win, 0.0)


def test_window_stays_full_rank(rng):
    for n, m in [(1, 1), (2, 1), (1, 2), (2, 2)]:
        win = InputWindow(n, m)
        c_p = 0.3
        for t in range(400):
            u_hat = rng.standard_normal(m) * (0.0 if t % 17 == 0 else 1.0)
            win.push(u_hat + perturb(u_hat, win, c_p))
            M = win.window_matrix()
            if M is not None:
                assert np.linalg.svd(M, compute_uv=False)[-1] > 1e-10


def test_window_gram_floor(rng):
    n, m = 1, 2
    win = InputWindow(n, m)
    c_p = 0.5
    for t in range(200):
        u_hat = 0.1 * rng.standard_normal(m)
        win.push(u_hat + perturb(u_hat, win, c_p))
        M = win.window_matrix()
        if M is not None:
            assert np.linalg.eigvalsh(M @ M.T)[0] > 0.0
            assert np.linalg.norm(M, axis=0).min() >= np.sqrt(c_p) - 1e-10


def test_window_columns_layout():
    win = InputWindow(1, 1)
    for u in (1.0, 2.0, 3.0):
        win.push([u])
    np.testing.assert_array_equal(win.columns(2), [[1.0, 2.0], [2.0, 3.0]])
    np.testing.assert_array_equal(win.window_matrix(), [[1.0, 2.0], [2.0, 3.0]])
    np.testing.assert_array_equal(window_vectors([[1.0], [2.0], [3.0]], 1), [[1.0, 2.0], [2.0, 3.0]])


def test_periodic_input_example():
    got = {t: periodic_excitation_input(t, 2, 2, 6.0) for t in (1, 2, 3, 4, 7)}
    np.testing.assert_array_equal(got[1], [0.0, 6.0])
    np.testing.assert_array_equal(got[2], [0.0, 0.0])
    np.testing.assert_array_equal(got[3], [0.0, 0.0])
    np.testing.assert_array_equal(got[4], [6.0, 0.0])
    np.testing.assert_array_equal(got[7], [0.0, 6.0])
    with pytest.raises(ContractError):
        periodic_excitation_input(0, 1, 1)


def test_periodic_input_scalar():
    for n in (1, 2, 3):
        for t in range(1, 40):
            u = periodic_excitation_input(t, n, 1)
            assert (u[0] != 0) == ((t - 1) % (n + 1) == 0)


@pytest.mark.parametrize("n,m", [(1, 1), (2, 1), (2, 2), (3, 2)])
@pytest.mark.parametrize("s", [1, 2, 3])
def test_periodic_window_gram(n, m, s):
    q = (n + 1) * m
    U = np.array([periodic_excitation_input(t, n, m) for t in range(1, s * q + n + 1)])
    W = window_vectors(U, n)[: s * q]
    # each period contributes every canonical basis vector of R^q exactly once
    lam = np.linalg.eigvalsh(W.T @ W)
    assert lam[0] >= s - 1e-12


def test_check_poe_identical():
    rep = check_poe(np.ones((10, 3)), gamma=0.5, c_p_i=1.0, t_i=10)
    assert rep.lambda_min == pytest.approx(0.0, abs=1e-12)
    assert not rep.passed


def test_check_poe_cycling_basis():
    s, d, reps = 3.0, 3, 5
    Z = np.tile(s * np.eye(d), (reps, 1))
    rep = check_poe(Z, gamma=1.0, c_p_i=1.0, t_i=len(Z), interval=2)
    assert rep.lambda_min == pytest.approx(s**2 * reps)
    assert rep.bound == pytest.approx(len(Z))
    assert rep.passed and rep.interval == 2


def test_check_poe_history_and_V(rng):
    Z = rng.standard_normal((20, 3))
    with pytest.raises(ContractError):
        check_poe(Z, t_i=30)
    a = check_poe(Z, t_i=15)
    b = check_poe(V=Z[:15].T @ Z[:15], t_i=15)
    assert a.lambda_min == pytest.approx(b.lambda_min)
