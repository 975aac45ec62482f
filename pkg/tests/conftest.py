import numpy as np
import pytest

from unfoldls.data import CoilSensitivities
from unfoldls.operators import EncodingOperator
from unfoldls.simulate import golden_trajectory


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_operator(rng, nx=8, ny=8, nt=3, ncoils=2, spokes_per_frame=3, nread=6):
    sens = CoilSensitivities(crandn(rng, ncoils, ny, nx))
    nspokes = nt * spokes_per_frame
    traj = golden_trajectory(nspokes, nread)
    binning = np.arange(nspokes) // spokes_per_frame
    return EncodingOperator(sens, traj, binning, nt)


def dense_matrix(op):
    """Explicit encoding matrix built from the defining sum, rows = (coil, spoke, read)."""
    nt, ny, nx = op.ishape
    xs = np.arange(nx) - nx // 2
    ys = np.arange(ny) - ny // 2
    X, Y = np.meshgrid(xs, ys)
    E = np.zeros(op.oshape + op.ishape, dtype=complex)
    for c in range(op.ncoils):
        for s in range(op.nspokes):
            f = op.binning[s]
            for r in range(op.nread):
                kx, ky = op.traj[s, r]
                E[c, s, r, f] = op.sens[c] * np.exp(-2j * np.pi * (kx * X + ky * Y))
    E /= np.sqrt(nx * ny)
    return E.reshape(int(np.prod(op.oshape)), int(np.prod(op.ishape)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def prox_violations(prox, penalty, x, alpha, rng, n_perturb=1000):
    """Count random points that beat ``prox(x)`` on ``1/2||y - x||^2 + alpha * penalty(y)``."""
    def f(y):
        return 0.5 * np.linalg.norm(y - x) ** 2 + alpha * penalty(y)

    y0 = prox(x, alpha)
    best = f(y0)
    bad = 0
    for i in range(n_perturb):
        scale = 10.0 ** rng.uniform(-3, 0)
        y = y0 + scale * crandn(rng, *np.shape(x))
        if f(y) <= best:
            bad += 1
    return bad


def random_problem(seed, nx=8, ny=8, nt=12, ncoils=2, spokes_per_frame=4, noise=0.05):
    """Small L+S instance: rank-1 background plus a bright pixel that switches on."""
    from unfoldls.solver import Problem

    rng = np.random.default_rng(seed)
    op = random_operator(rng, nx, ny, nt, ncoils, spokes_per_frame, nread=2 * nx)
    x = np.outer(np.linspace(1, 2, nt), crandn(rng, ny * nx)).reshape(nt, ny, nx)
    x[nt // 2:, ny // 2, nx // 2] += 3.0
    y = op.forward(x) + noise * crandn(rng, *op.oshape)
    return Problem(op, y), x


def gradient_instance(seed, nx=6, nt=8, ncoils=2, spokes_per_frame=4, noise=0.05):
    from unfoldls.simulate import synth_sensitivities
    from unfoldls.solver import Problem

    rng = np.random.default_rng(seed)
    sens = synth_sensitivities(ncoils, nx, nx)
    traj = golden_trajectory(nt * spokes_per_frame, 2 * nx)
    op = EncodingOperator(sens, traj, np.repeat(np.arange(nt), spokes_per_frame))
    base = crandn(rng, 1, nx, nx)
    gt = base * (1 + 0.3 * np.linspace(0, 1, nt))[:, None, None] + 0.2 * crandn(rng, nt, nx, nx)
    d = op.forward(gt) + noise * crandn(rng, *op.oshape)
    return Problem(op, d), gt, rng


def _active_pattern(model, problem):
    from unfoldls.unfolded import forward

    _, _, tape = forward(model, problem)
    out = []
    for rec, p in zip(tape.records, tape.layer_params):
        out.append(np.abs(rec["z"]) > p.threshold_S)
        out.append(rec["svd"].sigma > problem.tau * p.threshold_L)
    return out


def fd_gradient_check(model, problem, gt, fraction=0.5, h=1e-5, backend="exact"):
    """Analytic vs central-difference gradients of the truncated MAE.

    Returns ``(rel_err, excluded)`` per parameter.  A parameter is excluded
    when its +-h perturbation moves any activation input across its kink.
    The relative error is floored at ``1e-8 * max|fd|``.
    """
    from unfoldls.metrics import mae_loss
    from unfoldls.unfolded import _flatten, forward, loss_and_grad

    _, grads = loss_and_grad(model, problem, gt, fraction, backend)
    analytic = _flatten(model, grads)
    theta = model.get_vector()
    fd = np.zeros_like(theta)
    excluded = np.zeros(theta.size, dtype=bool)
    for i in range(theta.size):
        vals, pats = [], []
        for sgn in (1.0, -1.0):
            m2 = model.copy()
            v = theta.copy()
            v[i] += sgn * h
            m2.set_vector(v)
            L, S, _ = forward(m2, problem, record=False)
            vals.append(mae_loss(L + S, gt, fraction))
            pats.append(_active_pattern(m2, problem))
        fd[i] = (vals[0] - vals[1]) / (2 * h)
        excluded[i] = any(not np.array_equal(a, b) for a, b in zip(*pats))
    denom = np.maximum(np.abs(fd), 1e-8 * np.abs(fd).max())
    return np.abs(analytic - fd) / denom, excluded


ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
