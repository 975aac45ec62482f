import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn, dense_matrix, random_operator
from unfoldls.data import CoilSensitivities, ImageSequence
from unfoldls.operators import EncodingOperator, Identity, TemporalDiff, op_norm, tdiff


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_forward_adjoint_normal_match_dense(rng):
    op = random_operator(rng)
    E = dense_matrix(op)
    x = crandn(rng, *op.ishape)
    y = crandn(rng, *op.oshape)
    fx = op.forward(x)
    np.testing.assert_allclose(fx.ravel(), E @ x.ravel(), rtol=0, atol=1e-10 * np.abs(fx).max())
    ay = op.adjoint(y)
    np.testing.assert_allclose(ay.ravel(), E.conj().T @ y.ravel(), rtol=0,
                               atol=1e-10 * np.abs(ay).max())
    nx_ = op.normal(x)
    ref = E.conj().T @ (E @ x.ravel())
    np.testing.assert_allclose(nx_.ravel(), ref, rtol=0, atol=1e-10 * np.abs(ref).max())


@pytest.mark.parametrize("seed", range(5))
def test_adjointness(seed):
    rng = np.random.default_rng(seed)
    op = random_operator(rng, nx=4, ny=4, nt=5)
    x = crandn(rng, *op.ishape)
    y = crandn(rng, *op.oshape)
    assert _rel(np.vdot(op.forward(x), y), np.vdot(x, op.adjoint(y))) <= 1e-12


def test_single_pixel_samples_equal_pixel():
    sens = CoilSensitivities(np.ones((1, 1, 1)))
    traj = np.random.default_rng(0).uniform(-0.35, 0.35, (3, 5, 2))
    op = EncodingOperator(sens, traj, np.array([0, 1, 1]))
    x = np.array([2.0 - 1.0j, 0.5j]).reshape(2, 1, 1)
    y = op.forward(x)
    np.testing.assert_allclose(y[0, 0], 2.0 - 1.0j, atol=1e-15)
    np.testing.assert_allclose(y[0, 1:], 0.5j, atol=1e-15)


def test_tdiff_example():
    seq = ImageSequence(np.array([0.0, 1.0, 3.0]).reshape(3, 1, 1))
    np.testing.assert_array_equal(tdiff(seq).ravel(), [1.0, 2.0])


def test_tdiff_constant_is_zero(rng):
    frame = crandn(rng, 3, 4)
    assert np.all(tdiff(ImageSequence(np.repeat(frame[None], 5, axis=0))) == 0)


@pytest.mark.parametrize("nt", [2, 3, 7, 20])
def test_tdiff_norm_closed_form(nt):
    T = np.diff(np.eye(nt), axis=0)
    dense = np.linalg.norm(T, 2)
    td = TemporalDiff(nt)
    assert td.norm() == pytest.approx(dense, rel=1e-12)
    assert td.norm() ** 2 <= 4.0


def test_tdiff_rejects_single_frame():
    with pytest.raises(ValueError):
        TemporalDiff(1)


@settings(max_examples=30, deadline=None)
@given(nt=st.integers(2, 9), seed=st.integers(0, 10 ** 6))
def test_tdiff_adjointness(nt, seed):
    rng = np.random.default_rng(seed)
    td = TemporalDiff(nt, (2, 3))
    x = crandn(rng, nt, 2, 3)
    d = crandn(rng, nt - 1, 2, 3)
    assert _rel(np.vdot(td.forward(x), d), np.vdot(x, td.adjoint(d))) <= 1e-12


def test_op_norm_matches_dense(rng):
    op = random_operator(rng, nx=6, ny=6, nt=2)
    dense = np.linalg.norm(dense_matrix(op), 2)
    assert op_norm(op, n_iter=200) == pytest.approx(dense, rel=1e-2)


def test_op_norm_identity():
    assert op_norm(Identity((3, 4, 5))) == pytest.approx(1.0, rel=1e-12)


def test_op_norm_monotone_in_iterations(rng):
    op = random_operator(rng, nx=6, ny=6, nt=2)
    vals = [op_norm(op, n_iter=n) for n in (1, 5, 20, 80)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_shape_errors(rng):
    op = random_operator(rng, nx=4, ny=4)
    with pytest.raises(ValueError):
        op.forward(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        op.adjoint(np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        EncodingOperator(CoilSensitivities(np.ones((1, 2, 2))), np.zeros((2, 3, 2)),
                         np.array([0, 2]))
