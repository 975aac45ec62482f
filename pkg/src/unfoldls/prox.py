"""Thresholding operators and the learnable activations built from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NumericalError

MODES = ("simple", "soft", "garrote")
BRANCHES = ("L", "S")


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``X = U @ diag(sigma) @ V^H`` with ``r = min(m, n)``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self, sigma=None) -> np.ndarray:
        s = self.sigma if sigma is None else sigma
        return (self.U * s) @ self.V.conj().T


def svd(X) -> SvdFactors:
    """Thin SVD via LAPACK (divide and conquer, falling back to QR iteration)."""
    X = np.asarray(X)
    if not np.all(np.isfinite(X)):
        raise NumericalError("SVD input contains NaN or Inf")
    try:
        U, s, Vh = np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError:
        import scipy.linalg

        try:
            U, s, Vh = scipy.linalg.svd(X, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD did not converge: {exc}") from exc
    return SvdFactors(U, s, Vh.conj().T)


def soft(z, alpha):
    """Magnitude soft-thresholding; keeps the phase of complex inputs."""
    z = np.asarray(z)
    mag = np.abs(z)
    shrunk = np.maximum(mag - alpha, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(mag > 0, shrunk / np.where(mag > 0, mag, 1.0), 0.0)
    return z * scale


def garrote(z, alpha):
    """Non-negative garrote ``z * max(0, 1 - alpha**2 / |z|**2)``."""
    z = np.asarray(z)
    mag2 = np.abs(z) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(mag2 > 0, 1.0 - alpha ** 2 / np.where(mag2 > 0, mag2, 1.0), 0.0)
    return z * np.maximum(scale, 0.0)


def svt(X, alpha, return_factors: bool = False):
    """Singular value thresholding, the prox of ``alpha * ||X||_*``."""
    fac = svd(X)
    Y = fac.reconstruct(soft(fac.sigma, alpha))
    return (Y, fac) if return_factors else Y


def nuclear_norm(X) -> float:
    return float(np.sum(np.linalg.svd(X, compute_uv=False)))


@dataclass(frozen=True)
class ActivationParams:
    """Thresholds (and, in ``soft`` mode, slopes) for the L and S branches."""

    mode: str
    threshold_L: float
    threshold_S: float
    slope_L: float | None = None
    slope_S: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown activation mode {self.mode!r}")
        if self.threshold_L < 0 or self.threshold_S < 0:
            raise ValueError("thresholds must be non-negative")
        if self.mode == "soft":
            if self.slope_L is None:
                object.__setattr__(self, "slope_L", 1.0)
            if self.slope_S is None:
                object.__setattr__(self, "slope_S", 1.0)
        elif self.slope_L is not None or self.slope_S is not None:
            raise ValueError(f"{self.mode} activation carries no slopes")

    @property
    def n_params(self) -> int:
        return 4 if self.mode == "soft" else 2

    def threshold(self, branch: str) -> float:
        return self.threshold_L if branch == "L" else self.threshold_S

    def slope(self, branch: str) -> float:
        return self.slope_L if branch == "L" else self.slope_S


def _scalar_activation(params: ActivationParams, branch: str, x, alpha):
    if params.mode == "simple":
        return soft(x, alpha)
    if params.mode == "soft":
        return params.slope(branch) * soft(x, alpha)
    return garrote(x, alpha)


def apply_activation(params: ActivationParams, branch: str, x, scale: float = 1.0,
                     return_factors: bool = False):
    """Learnable replacement of the two thresholding steps.

    The S branch acts pointwise.  The L branch acts on the singular values of
    the matrix ``x``.  The threshold used is ``scale * threshold``, so a CPA
    iteration passes ``scale=tau`` for the L branch.  In ``simple`` mode the
    result is exactly ``soft`` / ``svt``.
    """
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    alpha = scale * params.threshold(branch)
    if branch == "S":
        return _scalar_activation(params, branch, x, alpha)
    if params.mode == "simple":
        return svt(x, alpha, return_factors=return_factors)
    fac = svd(x)
    Y = fac.reconstruct(_scalar_activation(params, branch, fac.sigma, alpha))
    return (Y, fac) if return_factors else Y
