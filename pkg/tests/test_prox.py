import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn, prox_violations
from unfoldls.data import NumericalError
from unfoldls.prox import ActivationParams, apply_activation, garrote, nuclear_norm, soft, svd, svt


def test_soft_examples():
    assert soft(1.2, 0.5) == pytest.approx(0.7)
    assert soft(3 + 4j, 1.0) == pytest.approx(2.4 + 3.2j)
    z = np.array([0.0, -2.0, 1e-3 + 5j])
    np.testing.assert_array_equal(soft(z, 0.0), z)
    assert soft(0j, 0.5) == 0


def test_svt_examples():
    rng = np.random.default_rng(0)
    X = crandn(rng, 4, 3)
    np.testing.assert_allclose(svt(X, 0.0), X, atol=1e-10 * np.linalg.norm(X))
    np.testing.assert_allclose(svt(np.diag([3.0, 1.0]), 2.0), np.diag([1.0, 0.0]), atol=1e-14)


def test_garrote_examples():
    assert garrote(2.0, 1.0) == pytest.approx(1.5)
    assert garrote(0.5, 1.0) == 0
    assert garrote(1 - 2j, 0.0) == 1 - 2j


def test_svd_examples():
    np.testing.assert_allclose(svd(np.eye(3)).sigma, [1, 1, 1])
    u = np.array([2.0, 0, 0])
    v = np.array([0, 1.0j])
    s = svd(np.outer(u, v.conj())).sigma
    np.testing.assert_allclose(s, [2.0, 0.0], atol=1e-14)


def test_svd_invariants_and_gram_oracle():
    rng = np.random.default_rng(1)
    X = crandn(rng, 6, 4)
    f = svd(X)
    assert np.linalg.norm(f.reconstruct() - X) / np.linalg.norm(X) <= 1e-10
    np.testing.assert_allclose(f.U.conj().T @ f.U, np.eye(4), atol=1e-10)
    np.testing.assert_allclose(f.V.conj().T @ f.V, np.eye(4), atol=1e-10)
    assert np.all(np.diff(f.sigma) <= 0)
    eig = np.sort(np.linalg.eigvalsh(X.conj().T @ X))[::-1]
    np.testing.assert_allclose(f.sigma ** 2, eig, rtol=1e-8)


def test_svd_rejects_nan():
    with pytest.raises(NumericalError):
        svd(np.array([[np.nan, 0.0]]))


def test_svt_prox_optimality_5x7():
    rng = np.random.default_rng(2)
    X = crandn(rng, 5, 7)
    assert prox_violations(svt, nuclear_norm, X, 0.3, rng) == 0


def test_soft_prox_optimality():
    rng = np.random.default_rng(3)
    x = crandn(rng, 12)
    assert prox_violations(soft, lambda y: np.sum(np.abs(y)), x, 0.7, rng) == 0


def test_svt_singular_values_are_thresholded():
    rng = np.random.default_rng(4)
    X = crandn(rng, 8, 5)
    s = np.linalg.svd(X, compute_uv=False)
    out = np.linalg.svd(svt(X, 1.5), compute_uv=False)
    np.testing.assert_allclose(out, np.maximum(s - 1.5, 0), atol=1e-10)
    assert np.linalg.matrix_rank(svt(X, 1.5)) <= np.linalg.matrix_rank(X)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), alpha=st.floats(0, 3))
def test_nonexpansive(seed, alpha):
    rng = np.random.default_rng(seed)
    x, y = crandn(rng, 6, 4), crandn(rng, 6, 4)
    bound = np.linalg.norm(x - y) * (1 + 1e-12)
    assert np.linalg.norm(soft(x, alpha) - soft(y, alpha)) <= bound
    assert np.linalg.norm(svt(x, alpha) - svt(y, alpha)) <= bound


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_svt_unitary_invariance(seed):
    rng = np.random.default_rng(seed)
    X = crandn(rng, 5, 4)
    Q, _ = np.linalg.qr(crandn(rng, 5, 5))
    P, _ = np.linalg.qr(crandn(rng, 4, 4))
    a = np.linalg.svd(svt(Q @ X @ P.conj().T, 0.8), compute_uv=False)
    b = np.linalg.svd(svt(X, 0.8), compute_uv=False)
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(mag=st.floats(1e-6, 1e6), phase=st.floats(-np.pi, np.pi), frac=st.floats(0, 0.999999))
def test_garrote_dominates_soft(mag, phase, frac):
    z = mag * np.exp(1j * phase)
    alpha = frac * mag
    assert abs(garrote(z, alpha)) >= abs(soft(z, alpha)) * (1 - 1e-12)


def test_garrote_tends_to_identity():
    z = np.array([1e3, 1e6]) * (1 + 1j)
    np.testing.assert_allclose(garrote(z, 1.0), z, rtol=1e-6)


def test_soft_mode_with_unit_slope_equals_simple():
    rng = np.random.default_rng(5)
    simple = ActivationParams("simple", 0.5, 0.5)
    soft_p = ActivationParams("soft", 0.5, 0.5, 1.0, 1.0)
    z = crandn(rng, 1000)
    np.testing.assert_array_equal(apply_activation(soft_p, "S", z), apply_activation(simple, "S", z))
    X = crandn(rng, 10, 4)
    np.testing.assert_array_equal(apply_activation(soft_p, "L", X), apply_activation(simple, "L", X))


def test_activation_examples():
    p = ActivationParams("soft", 0.0, 0.0, 2.0, 2.0)
    assert apply_activation(p, "S", 1.5) == pytest.approx(3.0)
    g = ActivationParams("garrote", 1.0, 1.0)
    np.testing.assert_allclose(apply_activation(g, "L", np.diag([3.0, 1.0])),
                               np.diag([3.0 * 8 / 9, 0.0]), atol=1e-14)


def test_simple_activation_is_soft_and_svt():
    rng = np.random.default_rng(6)
    p = ActivationParams("simple", 0.3, 0.2)
    z = crandn(rng, 50)
    np.testing.assert_array_equal(apply_activation(p, "S", z), soft(z, 0.2))
    X = crandn(rng, 6, 3)
    np.testing.assert_array_equal(apply_activation(p, "L", X, scale=0.5), svt(X, 0.15))


def test_activation_param_validation():
    with pytest.raises(ValueError):
        ActivationParams("relu", 1.0, 1.0)
    with pytest.raises(ValueError):
        ActivationParams("simple", -1.0, 1.0)
    with pytest.raises(ValueError):
        ActivationParams("garrote", 1.0, 1.0, slope_L=2.0)
    assert ActivationParams("soft", 1.0, 1.0).n_params == 4
    assert ActivationParams("garrote", 1.0, 1.0).n_params == 2
    with pytest.raises(ValueError):
        apply_activation(ActivationParams("simple", 1.0, 1.0), "X", 1.0)
