import numpy as np
import pytest

from conftest import crandn, dense_matrix, random_operator, random_problem
from unfoldls.data import casorati_matrix
from unfoldls.solver import (Problem, SolveConfig, StepSizeError, cpa_iterate, cpa_solve,
                             grid_search, initial_state, objective)


def test_zero_data_is_fixed_point():
    rng = np.random.default_rng(0)
    op = random_operator(rng, nx=4, ny=4, nt=4)
    prob = Problem(op, np.zeros(op.oshape, complex))
    L, S = cpa_solve(prob, SolveConfig(0.1, 0.1, max_iter=7))
    assert not np.any(L.data) and not np.any(S.data)


def test_objective_zero_cases():
    rng = np.random.default_rng(1)
    op = random_operator(rng, nx=4, ny=4, nt=3)
    zero = np.zeros(op.ishape, complex)
    assert objective(zero, zero, Problem(op, np.zeros(op.oshape, complex)), 1.0, 1.0) == 0.0
    # constant-in-time S that reproduces the data exactly
    S = np.repeat(crandn(rng, 4, 4)[None], 3, axis=0)
    assert objective(zero, S, Problem(op, op.forward(S)), 1.0, 1.0) == pytest.approx(0, abs=1e-20)


def test_objective_dense_oracle():
    prob, _ = random_problem(2, nx=4, ny=4, nt=5)
    rng = np.random.default_rng(3)
    L, S = crandn(rng, *prob.shape), crandn(rng, *prob.shape)
    E = dense_matrix(prob.op)
    resid = E @ (L + S).ravel() - prob.samples.ravel()
    nuc = np.sum(np.linalg.svd(L.reshape(5, -1), compute_uv=False))
    T = np.diff(np.eye(5), axis=0)
    tv = np.sum(np.abs(T @ S.reshape(5, -1)))
    ref = 0.5 * np.linalg.norm(resid) ** 2 + 0.2 * nuc + 0.3 * tv
    assert objective(L, S, prob, 0.2, 0.3) == pytest.approx(ref, rel=1e-10)


def test_objective_decreases_from_init():
    prob, _ = random_problem(4)
    st0 = initial_state(prob)
    st = cpa_iterate(prob, SolveConfig(0.05, 0.01, max_iter=200))
    assert objective(st.L, st.S, prob, 0.05, 0.01) < objective(st0.L, st0.S, prob, 0.05, 0.01)


def test_initial_state_is_rank_one():
    prob, _ = random_problem(5)
    st = initial_state(prob)
    assert np.linalg.matrix_rank(casorati_matrix(st.L), tol=1e-8 * np.abs(st.L).max()) == 1
    assert not np.any(st.S) and not np.any(st.N) and st.c == 0


def test_step_sizes():
    prob, _ = random_problem(6, nx=4, ny=4, nt=3)
    assert prob.rho * prob.tau < prob.bound
    with pytest.raises(StepSizeError):
        Problem(prob.op, prob.samples, rho=1.0, tau=1.0)
    with pytest.raises(ValueError):
        Problem(prob.op, prob.samples, rho=0.1)


def test_solve_is_deterministic():
    prob, _ = random_problem(7)
    cfg = SolveConfig(0.05, 0.01, max_iter=30)
    a = cpa_solve(prob, cfg)
    b = cpa_solve(prob, cfg)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_stop_tol_stops_early():
    prob, _ = random_problem(8)
    st = cpa_iterate(prob, SolveConfig(0.05, 0.01, max_iter=5000, stop_tol=1e-3))
    assert st.iter < 5000


def test_rank_nonincreasing_in_lambda_L():
    prob, _ = random_problem(9)
    ranks = []
    for lam in (0.01, 0.1, 1.0, 10.0):
        L, _ = cpa_solve(prob, SolveConfig(lam, 0.01, max_iter=300))
        s = np.linalg.svd(casorati_matrix(L.data), compute_uv=False)
        ranks.append(int(np.sum(s > 1e-6 * s[0])) if s[0] > 0 else 0)
    assert all(b <= a for a, b in zip(ranks, ranks[1:]))


def test_solve_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(0.0, 1.0)
    with pytest.raises(ValueError):
        SolveConfig(1.0, 1.0, max_iter=0)


def _train_set(n=2):
    out = []
    for seed in range(n):
        prob, x = random_problem(20 + seed, nx=4, ny=4, nt=6)
        out.append((prob, x))
    return out


def test_grid_search_single_point():
    best, scores = grid_search(_train_set(1), [0.05], [0.02], SolveConfig(1, 1, max_iter=10))
    assert best == (0.05, 0.02) and list(scores) == [(0.05, 0.02)]


def test_grid_search_matches_exhaustive():
    ts = _train_set()
    cfg = SolveConfig(1, 1, max_iter=20)
    grid_L, grid_S = [0.3, 0.01, 0.1], [0.1, 0.001, 0.01]
    best, scores = grid_search(ts, grid_L, grid_S, cfg)
    assert len(scores) == 9
    assert scores[best] == min(scores.values())
    assert grid_search(ts, grid_L, grid_S, cfg) == (best, scores)


def test_grid_search_tie_break(monkeypatch):
    monkeypatch.setattr("unfoldls.solver.mae", lambda a, b: 1.0)
    best, scores = grid_search(_train_set(1), [0.2, 0.1], [0.5, 0.3], SolveConfig(1, 1, max_iter=2))
    assert set(scores.values()) == {1.0}
    assert best == (0.1, 0.3)


def test_grid_search_errors():
    with pytest.raises(ValueError):
        grid_search([], [1.0], [1.0])
    with pytest.raises(ValueError):
        grid_search(_train_set(1), [], [1.0])


def test_matches_textbook_updates():
    # explicit k-space dual M and dense operators instead of the implicit form
    from unfoldls.prox import soft, svt

    prob, _ = random_problem(7, nx=4, ny=4, nt=5, spokes_per_frame=3)
    E = dense_matrix(prob.op)
    nt, ny, nx = prob.shape
    shp = prob.shape
    lam_L, lam_S = 0.05, 0.02
    rho, tau = prob.rho, prob.tau
    st0 = initial_state(prob)
    L, S = st0.L.copy(), st0.S.copy()
    Lb, Sb = L.copy(), S.copy()
    d = prob.samples.ravel()
    M = np.zeros_like(d)
    N = np.zeros((nt - 1, ny, nx), dtype=complex)
    for _ in range(15):
        M = (M + rho * (E @ (Lb + Sb).ravel()) - rho * d) / (1 + rho)
        z = N + rho * np.diff(Sb, axis=0)
        N = z - soft(z, lam_S)
        adjM = (E.conj().T @ M).reshape(shp)
        Ln = svt((L - tau * adjM).reshape(nt, -1).T, tau * lam_L).T.reshape(shp)
        Sn = S - tau * adjM - tau * prob.td.adjoint(N)
        Lb, Sb, L, S = 2 * Ln - L, 2 * Sn - S, Ln, Sn
    st = cpa_iterate(prob, SolveConfig(lam_L, lam_S, max_iter=15))
    assert np.allclose(st.L, L, atol=1e-10)
    assert np.allclose(st.S, S, atol=1e-10)
    assert np.allclose(st.kspace_dual(prob).ravel(), M, atol=1e-10)
