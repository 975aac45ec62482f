"""Deep-unfolded L+S network.

Each of the ``K`` layers is one primal-dual iteration (``solver.cpa_layer``)
whose two thresholding steps are learnable activations.  Gradients are
computed by a hand-written reverse pass over a recorded tape.

Complex gradients follow the convention ``g = dl/dRe(z) + 1j * dl/dIm(z)``
for a real loss ``l``; a complex-linear map ``y = B x`` then pulls back as
``g_x = B^H g_y``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import ImageSequence, NumericalError, casorati_matrix, casorati_unfold
from .metrics import frames_used, mae, mae_loss
from .prox import MODES, ActivationParams, SvdFactors
from .solver import LSState, Problem, cpa_layer, initial_state

log = logging.getLogger(__name__)

BACKENDS = ("exact", "frozen")


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int, msg: str = "loss became NaN"):
        super().__init__(f"{msg} in epoch {epoch}")
        self.epoch = epoch


class UnfoldedModel:
    """K-layer unfolded network.

    Parameters are kept as arrays with one entry per layer (untied) or a
    single entry shared by all layers (tied): ``threshold_L``,
    ``threshold_S`` and, in ``soft`` mode, ``slope_L`` and ``slope_S``.
    """

    def __init__(self, mode: str, layers: int = 100, tied: bool = False,
                 lambda_L: float = 0.0234, lambda_S: float = 1.6e-5):
        if mode not in MODES:
            raise ValueError(f"unknown activation mode {mode!r}")
        if layers < 1:
            raise ValueError("need at least one layer")
        self.mode = mode
        self.layers = int(layers)
        self.tied = bool(tied)
        n = 1 if tied else self.layers
        self.params = {"threshold_L": np.full(n, float(lambda_L)),
                       "threshold_S": np.full(n, float(lambda_S))}
        if mode == "soft":
            self.params["slope_L"] = np.ones(n)
            self.params["slope_S"] = np.ones(n)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def layer_params(self, k: int) -> ActivationParams:
        i = 0 if self.tied else k
        p = {name: float(v[i]) for name, v in self.params.items()}
        return ActivationParams(self.mode, **p)

    def get_vector(self) -> np.ndarray:
        return np.concatenate([self.params[n] for n in self.names])

    def set_vector(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for n in self.names:
            size = self.params[n].size
            self.params[n] = vec[i:i + size].copy()
            i += size

    def project(self) -> None:
        """Clamp thresholds to be non-negative."""
        for n in ("threshold_L", "threshold_S"):
            np.maximum(self.params[n], 0.0, out=self.params[n])

    def copy(self) -> "UnfoldedModel":
        other = UnfoldedModel.__new__(UnfoldedModel)
        other.mode, other.layers, other.tied = self.mode, self.layers, self.tied
        other.params = {n: v.copy() for n, v in self.params.items()}
        return other


@dataclass
class GradientTape:
    """Per-layer activation inputs, SVD factors and the parameters used."""

    problem: Problem
    records: list = field(default_factory=list)
    layer_params: list = field(default_factory=list)


def forward(model: UnfoldedModel, problem: Problem, record: bool = True,
            state: LSState | None = None):
    """Run all layers; returns ``(L, S, tape)`` as arrays (tape is None if not recording)."""
    state = initial_state(problem) if state is None else state
    tape = GradientTape(problem) if record else None
    for k in range(model.layers):
        params = model.layer_params(k)
        try:
            state = cpa_layer(state, problem, params, tape.records if record else None, index=k)
        except NumericalError:
            raise
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"layer {k}: {exc}") from exc
        if record:
            tape.layer_params.append(params)
    return state.L, state.S, tape


def reconstruct(model: UnfoldedModel, problem: Problem) -> ImageSequence:
    L, S, _ = forward(model, problem, record=False)
    return ImageSequence(L + S)


# -- activation derivatives -------------------------------------------------

def _pointwise_backward(params: ActivationParams, z, alpha, g):
    """VJP of the pointwise S-branch activation.

    Returns the input gradient and the derivatives with respect to the
    threshold ``alpha`` and the slope (0 outside soft mode).
    """
    r = np.abs(z)
    active = r > alpha
    r_safe = np.where(active, r, 1.0)
    u = np.where(active, z / r_safe, 0.0)
    proj = np.conj(u) * g
    g_rad, g_tan = proj.real, proj.imag
    if params.mode == "garrote":
        ratio = alpha ** 2 / r_safe ** 2
        grad_z = u * (g_rad * (1 + ratio) + 1j * g_tan * (1 - ratio))
        d_alpha = float(np.sum(np.where(active, -2 * alpha / r_safe * g_rad, 0.0)))
        return np.where(active, grad_z, 0.0), d_alpha, 0.0
    s = params.slope_S if params.mode == "soft" else 1.0
    shrink = np.where(active, (r - alpha) / r_safe, 0.0)
    grad_z = u * (s * g_rad + 1j * s * shrink * g_tan)
    d_alpha = float(-s * np.sum(np.where(active, g_rad, 0.0)))
    d_slope = float(np.sum(np.where(active, (r - alpha) * g_rad, 0.0)))
    return grad_z, d_alpha, d_slope


def _spectral_values(params: ActivationParams, sigma, alpha):
    """``f(sigma)``, ``f'(sigma)``, ``df/dalpha`` and ``df/dslope`` on singular values."""
    active = sigma > alpha
    if params.mode == "garrote":
        s_safe = np.where(active, sigma, 1.0)
        f = np.where(active, sigma - alpha ** 2 / s_safe, 0.0)
        fprime = np.where(active, 1 + alpha ** 2 / s_safe ** 2, 0.0)
        f_alpha = np.where(active, -2 * alpha / s_safe, 0.0)
        return f, fprime, f_alpha, np.zeros_like(sigma)
    s = params.slope_L if params.mode == "soft" else 1.0
    base = np.where(active, sigma - alpha, 0.0)
    return s * base, np.where(active, s, 0.0), np.where(active, -s, 0.0), base


def _spectral_backward(params: ActivationParams, fac: SvdFactors, alpha, G, backend: str,
                       stats: dict, delta: float = 1e-8):
    """VJP of ``Y = U diag(f(sigma)) V^H`` with respect to the matrix input.

    ``exact`` differentiates U and V as well (SVD perturbation theory with
    ``sigma_j^2 - sigma_i^2`` denominators); ``frozen`` only differentiates
    the singular values.  A nearly repeated pair of singular values with a
    non-zero output makes the exact formula unreliable; that layer then
    falls back to ``frozen`` and ``stats['fallbacks']`` is incremented.
    """
    U, sigma, V = fac.U, fac.sigma, fac.V
    f, fprime, f_alpha, f_slope = _spectral_values(params, sigma, alpha)
    Gh = U.conj().T @ G @ V
    diag = np.real(np.diag(Gh))
    d_alpha = float(np.sum(f_alpha * diag))
    d_slope = float(np.sum(f_slope * diag))

    if backend == "exact":
        s2 = sigma ** 2
        denom = s2[None, :] - s2[:, None]
        live = (f[:, None] != 0) | (f[None, :] != 0)
        off = ~np.eye(len(sigma), dtype=bool)
        scale = max(s2.max(initial=0.0), np.finfo(float).tiny)
        if np.any(off & live & (np.abs(denom) < delta * scale)):
            stats["fallbacks"] = stats.get("fallbacks", 0) + 1
            backend = "frozen"

    if backend == "frozen":
        return (U * (fprime * diag)) @ V.conj().T, d_alpha, d_slope

    fs = f * sigma
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.where(live, (fs[None, :] - fs[:, None]) / denom, 0.0)
        B = np.where(live, (f[None, :] * sigma[:, None] - f[:, None] * sigma[None, :]) / denom, 0.0)
        ratio = np.where(sigma > 0, f / np.where(sigma > 0, sigma, 1.0), 0.0)
    idx = np.arange(len(sigma))
    pos = sigma > 0
    A[idx, idx] = np.where(pos, (fprime * sigma + f) / (2 * np.where(pos, sigma, 1.0)), fprime)
    B[idx, idx] = np.where(pos, (fprime * sigma - f) / (2 * np.where(pos, sigma, 1.0)), 0.0)
    P = A * Gh + (B * Gh).conj().T
    Vh = V.conj().T
    grad = U @ P @ Vh + ((G @ V - U @ Gh) * ratio) @ Vh
    return grad, d_alpha, d_slope


# -- reverse pass -----------------------------------------------------------

def backward(model: UnfoldedModel, tape: GradientTape, grad_L, grad_S=None,
             backend: str = "exact", stats: dict | None = None) -> dict[str, np.ndarray]:
    """Gradients of a real loss with respect to every model parameter.

    ``grad_L`` / ``grad_S`` are the loss gradients at the final L and S
    (``grad_S`` defaults to ``grad_L``, the case of a loss on ``L + S``).
    """
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    stats = {} if stats is None else stats
    problem = tape.problem
    op, td = problem.op, problem.td
    rho, tau = problem.rho, problem.tau
    nt, ny, nx = problem.shape
    grads = {n: np.zeros_like(v) for n, v in model.params.items()}

    gL = np.array(grad_L, dtype=np.complex128)
    gS = np.array(gL if grad_S is None else grad_S, dtype=np.complex128)
    gLb = np.zeros_like(gL)
    gSb = np.zeros_like(gL)
    gGm = np.zeros_like(gL)
    gN = np.zeros((nt - 1, ny, nx), dtype=np.complex128)

    for k in reversed(range(len(tape.records))):
        rec = tape.records[k]
        params = tape.layer_params[k]
        slot = 0 if model.tied else k

        gL_new = gL + 2 * gLb
        gS_new = gS + 2 * gSb
        gL = -gLb
        gS = -gSb

        # S' = S - tau A^H M - tau T^T N'
        gS = gS + gS_new
        g_adjM = -tau * gS_new
        gN_new = gN - tau * td.forward(gS_new)

        # L' = act_L(L - tau A^H M)
        gY, dA, dSl = _spectral_backward(params, rec["svd"], tau * params.threshold_L,
                                         casorati_matrix(gL_new), backend, stats)
        gY = casorati_unfold(gY, nx, ny)
        grads["threshold_L"][slot] += tau * dA
        if model.mode == "soft":
            grads["slope_L"][slot] += dSl
        gL = gL + gY
        g_adjM = g_adjM - tau * gY

        # N' = z - act_S(z)
        g_act, dA, dSl = _pointwise_backward(params, rec["z"], params.threshold_S, gN_new)
        gz = gN_new - g_act
        grads["threshold_S"][slot] -= dA
        if model.mode == "soft":
            grads["slope_S"][slot] -= dSl

        # z = N + rho T Sbar
        gN = gz
        gSb = rho * td.adjoint(gz)

        # A^H M' = Gm' + c' A^H d ;  Gm' = (Gm + rho A^H A xbar) / (1 + rho)
        gGm_new = gGm + g_adjM
        gGm = gGm_new / (1 + rho)
        gxbar = op.normal(rho * gGm_new / (1 + rho))
        gLb = gxbar
        gSb = gSb + gxbar
    return grads


def loss_and_grad(model: UnfoldedModel, problem: Problem, gt, fraction: float = 0.15,
                  backend: str = "exact", stats: dict | None = None):
    """MAE over the first ``ceil(fraction * nt)`` frames and its parameter gradients."""
    L, S, tape = forward(model, problem)
    recon = L + S
    gt = np.asarray(gt)
    nf = frames_used(recon.shape[0], fraction)
    diff = recon - gt
    diff[nf:] = 0.0
    mag = np.abs(diff)
    g = np.where(mag > 0, diff / np.where(mag > 0, mag, 1.0), 0.0) / mag[:nf].size
    loss = float(np.sum(mag) / mag[:nf].size)
    return loss, backward(model, tape, g, backend=backend, stats=stats)


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 2e-4
    loss_fraction: float = 0.15
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    backend: str = "exact"
    # "relative" scales each parameter's step by its initial magnitude
    lr_scale: str = "absolute"
    # slopes act multiplicatively in every layer, so small steps compound
    slope_lr_factor: float = 1.0

    def __post_init__(self):
        if not 0 < self.loss_fraction <= 1:
            raise ValueError("loss_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_scale not in ("absolute", "relative"):
            raise ValueError(f"unknown lr_scale {self.lr_scale!r}")
        if not self.slope_lr_factor >= 0:
            raise ValueError("slope_lr_factor must be non-negative")


_MIN_LR_SCALE = 1e-6


class Adam:
    def __init__(self, size: int, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _flatten(model: UnfoldedModel, grads: dict) -> np.ndarray:
    return np.concatenate([grads[n] for n in model.names])


def train(model: UnfoldedModel, dataset, cfg: TrainConfig = TrainConfig(), callback=None):
    """Adam on the truncated MAE, one gradient step per batch.

    Parameters
    ----------
    model : UnfoldedModel
        Trained in place and returned.
    dataset : sequence of (Problem, ground truth array)
    cfg : TrainConfig
    callback : callable, optional
        Called as ``callback(epoch, mean_loss, model)`` after every epoch.

    Returns
    -------
    model, history : UnfoldedModel, list of float
        ``history[e]`` is the mean training loss seen during epoch ``e``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs at least one sequence")
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    if cfg.lr_scale == "relative":
        lr = lr * np.maximum(np.abs(model.get_vector()), _MIN_LR_SCALE)
    if cfg.slope_lr_factor != 1.0:
        lr = lr * np.concatenate([np.full(model.params[n].size,
                                          cfg.slope_lr_factor if n.startswith("slope") else 1.0)
                                  for n in model.names])
    opt = Adam(model.n_params, lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    stats: dict = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            total = np.zeros(model.n_params)
            for i in batch:
                problem, gt = dataset[i]
                loss, grads = loss_and_grad(model, problem, gt, cfg.loss_fraction, cfg.backend,
                                            stats)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch)
                losses.append(loss)
                total += _flatten(model, grads)
            if not np.all(np.isfinite(total)):
                raise TrainingDivergedError(epoch, "gradient became non-finite")
            model.set_vector(opt.step(model.get_vector(), total / len(batch)))
            model.project()
        history.append(float(np.mean(losses)))
        log.info("epoch %d: loss %.6g", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1], model)
    if stats.get("fallbacks"):
        log.warning("exact SVD backward fell back to frozen factors %d times", stats["fallbacks"])
    return model, history


def evaluate(model: UnfoldedModel, dataset) -> float:
    """Mean whole-sequence MAE over ``(Problem, gt)`` pairs."""
    return float(np.mean([mae(reconstruct(model, p).data, gt) for p, gt in dataset]))


# -- parameter files --------------------------------------------------------

def save_params(model: UnfoldedModel, path) -> None:
    """``layer_index,branch,name,value`` per line; ``layer_index = -1`` when tied."""
    lines = [f"# mode = {model.mode}", f"# layers = {model.layers}",
             f"# tied = {str(model.tied).lower()}"]
    for name, values in model.params.items():
        kind, branch = name.split("_")
        for i, v in enumerate(values):
            idx = -1 if model.tied else i
            lines.append(f"{idx},{branch},{kind},{format(float(v), '.17g')}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> UnfoldedModel:
    meta, rows = {}, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key.strip()] = value.strip()
                continue
            idx, branch, kind, value = line.split(",")
            rows.append((int(idx), branch, kind, float(value)))
    tied = meta.get("tied", "false") == "true" or any(r[0] == -1 for r in rows)
    layers = int(meta.get("layers", 1 if tied else max(r[0] for r in rows) + 1))
    mode = meta.get("mode") or ("soft" if any(r[2] == "slope" for r in rows) else "simple")
    model = UnfoldedModel(mode, layers, tied, 0.0, 0.0)
    for idx, branch, kind, value in rows:
        model.params[f"{kind}_{branch}"][0 if tied else idx] = value
    return model
