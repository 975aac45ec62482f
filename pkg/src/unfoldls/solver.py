"""Chambolle-Pock iterations for the L+S problem

    min_{L,S}  1/2 ||A(L + S) - d||^2 + lam_L ||L||_* + lam_S ||T S||_1

The data-term dual ``M`` lives in k-space, but every update only needs
``A^H M``.  Starting from ``M = 0`` the dual stays of the form
``M = A m + c d`` with an image-domain ``m`` and a scalar ``c``, so an
iteration costs one application of ``A^H A`` (Toeplitz, see operators) plus
one SVD.  ``LSState.kspace_dual`` rebuilds ``M`` when it is needed.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import ImageSequence, KSpaceDataset, NumericalError, casorati_matrix, casorati_unfold
from .metrics import mae
from .operators import EncodingOperator, TemporalDiff, op_norm
from .prox import ActivationParams, apply_activation, nuclear_norm, svd

log = logging.getLogger(__name__)


class StepSizeError(ValueError):
    """rho * tau violates the convergence bound."""


@dataclass(frozen=True)
class SolveConfig:
    lambda_L: float
    lambda_S: float
    max_iter: int = 100
    stop_tol: float | None = None

    def __post_init__(self):
        if self.lambda_L <= 0 or self.lambda_S <= 0:
            raise ValueError("lambda_L and lambda_S must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


class Problem:
    """Everything an iteration needs besides the thresholds.

    Holds the encoding operator, temporal differences, measured samples
    ``d``, the back-projection ``A^H d`` and the step sizes.
    """

    def __init__(self, op: EncodingOperator, samples: np.ndarray, rho: float | None = None,
                 tau: float | None = None, power_iters: int = 100):
        samples = np.asarray(samples, dtype=np.complex128)
        if samples.shape != op.oshape:
            raise ValueError(f"samples {samples.shape} do not match operator {op.oshape}")
        self.op = op
        self.td = TemporalDiff(op.nt, (op.ny, op.nx))
        self.samples = samples
        self.backproj = op.adjoint(samples)
        self.norm_A = operator_norm(op, power_iters)
        self.norm_T = self.td.norm()
        self.bound = 1.0 / (4 * self.norm_A ** 2 + self.norm_T ** 2)
        if rho is None and tau is None:
            rho = tau = 0.99 * np.sqrt(self.bound)
        elif rho is None or tau is None:
            raise ValueError("give both rho and tau or neither")
        self.rho = float(rho)
        self.tau = float(tau)
        if not (self.rho > 0 and self.tau > 0 and self.rho * self.tau < self.bound):
            raise StepSizeError(
                f"rho*tau = {self.rho * self.tau:.6g} must be positive and below {self.bound:.6g}")

    @classmethod
    def from_dataset(cls, data: KSpaceDataset, sens, nt: int | None = None, **kw) -> "Problem":
        return cls(EncodingOperator.from_dataset(sens, data, nt), data.samples, **kw)

    @property
    def shape(self):
        return self.op.ishape

    def with_samples(self, samples) -> "Problem":
        """Same operator and step sizes, different measurements."""
        return Problem(self.op, samples, self.rho, self.tau)


def operator_norm(op: EncodingOperator, n_iter: int = 100) -> float:
    cache = getattr(op, "_norm_cache", None)
    if cache is None or cache[0] < n_iter:
        op._norm_cache = (n_iter, op_norm(op, n_iter=n_iter, seed=0))
    return op._norm_cache[1]


@dataclass
class LSState:
    """Iterates of the primal-dual scheme.

    ``m``, ``c`` and ``gram_m = A^H A m`` encode the k-space dual
    ``M = A m + c d``; ``N`` is the dual of the temporal-difference term.
    """

    L: np.ndarray
    S: np.ndarray
    Lbar: np.ndarray
    Sbar: np.ndarray
    m: np.ndarray
    gram_m: np.ndarray
    c: float
    N: np.ndarray
    rho: float
    tau: float
    iter: int = 0

    def kspace_dual(self, problem: Problem) -> np.ndarray:
        return problem.op.forward(self.m) + self.c * problem.samples

    def recon(self) -> np.ndarray:
        return self.L + self.S


def initial_state(problem: Problem) -> LSState:
    """L from the best rank-1 Casorati approximation of ``A^H d``; all else zero.

    The rank-1 term is rescaled by the real gain minimising ``||A L0 - d||``,
    since ``A^H A`` is far from the identity for undersampled radial data.
    """
    nt, ny, nx = problem.shape
    fac = svd(casorati_matrix(problem.backproj))
    sigma = np.zeros_like(fac.sigma)
    sigma[:1] = fac.sigma[:1]
    L0 = casorati_unfold(fac.reconstruct(sigma), nx, ny)
    # least-squares gain so that A L0 best matches d
    energy = float(np.vdot(L0, problem.op.normal(L0)).real)
    if energy > 0:
        L0 *= float(np.vdot(L0, problem.backproj).real) / energy
    zeros = np.zeros(problem.shape, dtype=np.complex128)
    return LSState(L=L0, S=zeros.copy(), Lbar=L0.copy(), Sbar=zeros.copy(), m=zeros.copy(),
                   gram_m=zeros.copy(), c=0.0,
                   N=np.zeros((nt - 1, ny, nx), dtype=np.complex128),
                   rho=problem.rho, tau=problem.tau)


def cpa_layer(state: LSState, problem: Problem, params: ActivationParams, record: list | None = None,
              index: int = 0) -> LSState:
    """One iteration with ``params`` supplying both thresholding steps.

    With ``mode='simple'`` this is exactly the classical update.  When
    ``record`` is a list, the quantities needed for differentiation are
    appended to it.
    """
    rho, tau = state.rho, state.tau
    op, td = problem.op, problem.td
    nt, ny, nx = problem.shape

    xbar = state.Lbar + state.Sbar
    gram_xbar = op.normal(xbar)
    gram_m = (state.gram_m + rho * gram_xbar) / (1 + rho)
    m = (state.m + rho * xbar) / (1 + rho)
    c = (state.c - rho) / (1 + rho)
    adj_M = gram_m + c * problem.backproj

    z = state.N + rho * td.forward(state.Sbar)
    N = z - apply_activation(params, "S", z)

    Y = state.L - tau * adj_M
    Lc, fac = apply_activation(params, "L", casorati_matrix(Y), scale=tau, return_factors=True)
    L = casorati_unfold(Lc, nx, ny)
    S = state.S - tau * adj_M - tau * td.adjoint(N)

    if not (np.all(np.isfinite(L)) and np.all(np.isfinite(S)) and np.all(np.isfinite(N))):
        raise NumericalError(f"non-finite iterate at layer {index}")
    if record is not None:
        record.append({"z": z, "svd": fac})
    return LSState(L=L, S=S, Lbar=2 * L - state.L, Sbar=2 * S - state.S, m=m, gram_m=gram_m,
                   c=c, N=N, rho=rho, tau=tau, iter=state.iter + 1)


def cpa_iterate(problem: Problem, cfg: SolveConfig, state: LSState | None = None) -> LSState:
    state = initial_state(problem) if state is None else state
    params = ActivationParams("simple", cfg.lambda_L, cfg.lambda_S)
    for k in range(cfg.max_iter):
        prev = state.recon() if cfg.stop_tol is not None else None
        state = cpa_layer(state, problem, params, index=k)
        if prev is not None:
            ref = np.linalg.norm(prev)
            if ref > 0 and np.linalg.norm(state.recon() - prev) <= cfg.stop_tol * ref:
                break
    return state


def cpa_solve(problem: Problem, cfg: SolveConfig) -> tuple[ImageSequence, ImageSequence]:
    """Run the classical iterations; returns the low-rank and sparse components."""
    state = cpa_iterate(problem, cfg)
    return ImageSequence(state.L), ImageSequence(state.S)


def objective(L, S, problem: Problem, lambda_L: float, lambda_S: float) -> float:
    """``1/2 ||A(L+S) - d||^2 + lam_L ||L||_* + lam_S ||T S||_1``."""
    L = np.asarray(L)
    S = np.asarray(S)
    resid = problem.op.forward(L + S) - problem.samples
    data = 0.5 * float(np.vdot(resid, resid).real)
    return (data + lambda_L * nuclear_norm(casorati_matrix(L))
            + lambda_S * float(np.sum(np.abs(problem.td.forward(S)))))


def grid_search(train_set, lambda_L_grid, lambda_S_grid, cfg: SolveConfig | None = None):
    """Pick the ``(lambda_L, lambda_S)`` pair with the lowest mean MAE.

    Parameters
    ----------
    train_set : sequence of (Problem, ground truth array)
    lambda_L_grid, lambda_S_grid : sequences of float
    cfg : SolveConfig, optional
        Supplies ``max_iter`` / ``stop_tol``; its lambdas are ignored.

    Returns
    -------
    best : tuple of float
    scores : dict mapping (lambda_L, lambda_S) to mean MAE
    """
    train_set = list(train_set)
    if not train_set:
        raise ValueError("grid search needs at least one training sequence")
    if len(lambda_L_grid) == 0 or len(lambda_S_grid) == 0:
        raise ValueError("grids must be non-empty")
    base = cfg or SolveConfig(1.0, 1.0)
    scores = {}
    for lam_L, lam_S in itertools.product(sorted(lambda_L_grid), sorted(lambda_S_grid)):
        run_cfg = replace(base, lambda_L=float(lam_L), lambda_S=float(lam_S))
        errs = [mae(cpa_iterate(prob, run_cfg).recon(), gt) for prob, gt in train_set]
        scores[(float(lam_L), float(lam_S))] = float(np.mean(errs))
        log.debug("grid point (%g, %g): MAE %.6g", lam_L, lam_S, scores[(lam_L, lam_S)])
    # product order is (lam_L asc, lam_S asc) and min keeps the first minimum
    best = min(scores, key=scores.get)
    return best, scores
