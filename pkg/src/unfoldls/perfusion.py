"""Pixel-wise pharmacokinetic analysis with the ATH model.

Curves are fitted by Levenberg-Marquardt in scaled-logit coordinates,
``p = upper * sigmoid(u)``, so every parameter stays inside its
physiological box ``0 < p < upper`` at every iterate (see ``FIT_UPPER``).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .data import ImageSequence
from .simulate import (MAP_NAMES, PARAM_NAMES, Perfusion, PerfusionMaps, _spgr_unit,
                       derive_params, tissue_curve)

log = logging.getLogger(__name__)

POPULATION_INIT = (0.3, 0.3, 8.0, 0.3)
_MAX_CONC = 1e3


# -- signal to concentration ------------------------------------------------

def to_concentration(curve, baseline, mode: str = "linear", scale: float = 1.0,
                     tr: float = 7.5e-3, fa_deg: float = 20.0, r10: float = 1.0 / 1.4,
                     r1: float = 4.5):
    """Invert ``simulate.signal_model``.

    Returns
    -------
    conc : ndarray
    clamped : ndarray of bool
        Samples with no admissible inverse.  In ``spgr`` mode a signal below
        the baseline maps to 0 and one beyond the saturation limit to the
        largest representable concentration.  The linear model is inverted
        exactly, negative values included.
    """
    curve = np.asarray(curve, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if mode == "linear":
        return (curve - baseline) / scale, np.zeros(curve.shape, dtype=bool)
    if mode != "spgr":
        raise ValueError(f"unknown signal mode {mode!r}")
    curve, baseline = np.broadcast_arrays(curve, baseline)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(baseline != 0, curve / baseline, 0.0)
    target = ratio * _spgr_unit(0.0, tr, fa_deg, r10, r1)
    below = target <= _spgr_unit(0.0, tr, fa_deg, r10, r1)
    above = target >= _spgr_unit(_MAX_CONC, tr, fa_deg, r10, r1)
    lo = np.zeros(curve.shape)
    hi = np.full(curve.shape, _MAX_CONC)
    # the SPGR signal is increasing in C for 0 < FA < 90 deg
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        up = _spgr_unit(mid, tr, fa_deg, r10, r1) < target
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    conc = np.where(below, 0.0, np.where(above, _MAX_CONC, 0.5 * (lo + hi)))
    return conc, below | above


# -- single-curve fit -------------------------------------------------------

@dataclass
class PixelFit:
    params: np.ndarray          # Fp, E, Tc, ve
    residual: float             # sum of squared residuals
    init_residual: float
    converged: bool
    n_iter: int


# F_p in mL/min/mL, E, T_c in s, v_e.  Without a finite flow ceiling, noisy
# curves drift along the F_p -> inf, E -> 0 valley at fixed E * F_p.
FIT_UPPER = np.array([2.0, 1.0, 60.0, 1.0])

# keeps every parameter strictly inside its open interval in float64
_U_LIM = 30.0


def _to_internal(p) -> np.ndarray:
    q = np.clip(np.asarray(p, dtype=np.float64) / FIT_UPPER, 1e-12, 1 - 1e-12)
    return np.log(q / (1 - q))


def _to_params(u) -> np.ndarray:
    u = np.clip(u, -_U_LIM, _U_LIM)
    return FIT_UPPER / (1.0 + np.exp(-u))


def _model(u, aif, t) -> np.ndarray:
    Fp, E, Tc, ve = _to_params(u)
    return tissue_curve(Perfusion(Fp, E, Tc, ve), aif, t)


def _jacobian(u, f0, aif, t, rel=1e-7):
    J = np.empty((len(f0), len(u)))
    for i in range(len(u)):
        h = rel * max(1.0, abs(u[i]))
        up = u.copy()
        up[i] += h
        down = u.copy()
        down[i] -= h
        J[:, i] = (_model(up, aif, t) - _model(down, aif, t)) / (2 * h)
    return J


def fit_pixel(conc, aif, t, init=POPULATION_INIT, max_iter: int = 200, step_tol: float = 1e-8,
              damping: float = 1e-3) -> PixelFit:
    """Least-squares fit of the ATH tissue curve to one concentration curve.

    Parameters
    ----------
    conc : array_like
        Concentration samples on ``t``.
    aif : array_like
        Arterial input samples on ``t``.
    t : array_like
        Strictly increasing sample times in seconds.
    init : sequence of float
        Starting ``(Fp, E, Tc, ve)``.

    Returns
    -------
    PixelFit
        ``converged`` is set when an accepted step is smaller than
        ``step_tol`` relative to the transformed parameters.  An all-zero
        curve returns ``Fp = 0`` unconverged.
    """
    conc = np.asarray(conc, dtype=np.float64)
    aif = np.asarray(aif, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if conc.shape != t.shape or aif.shape != t.shape:
        raise ValueError("curve, AIF and time grid must have equal length")
    if not np.all(np.isfinite(conc)):
        raise ValueError("curve contains NaN or Inf")
    init = np.asarray(init, dtype=np.float64)
    if not np.any(conc):
        zero = init.copy()
        zero[0] = 0.0
        ss = float(conc @ conc)
        return PixelFit(zero, ss, ss, False, 0)

    u = np.clip(_to_internal(init), -_U_LIM, _U_LIM)
    f = _model(u, aif, t)
    r = f - conc
    cost = float(r @ r)
    init_cost = cost
    mu = damping
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = _jacobian(u, f, aif, t)
        JtJ = J.T @ J
        g = J.T @ r
        diag = np.maximum(np.diag(JtJ), 1e-12 * max(np.max(np.diag(JtJ)), 1e-300))
        while True:
            try:
                step = -np.linalg.solve(JtJ + mu * np.diag(diag), g)
            except np.linalg.LinAlgError:
                step = np.full_like(u, np.nan)
            u_new = np.clip(u + step, -_U_LIM, _U_LIM)
            f_new = _model(u_new, aif, t) if np.all(np.isfinite(u_new)) else None
            if f_new is not None and np.all(np.isfinite(f_new)):
                r_new = f_new - conc
                cost_new = float(r_new @ r_new)
                if cost_new <= cost:
                    break
            mu *= 10.0
            if mu > 1e16:
                break
        if mu > 1e16:
            break
        small = np.linalg.norm(step) <= step_tol * (np.linalg.norm(u) + step_tol)
        u, f, r, cost = u_new, f_new, r_new, cost_new
        mu = max(mu / 10.0, 1e-12)
        if small or cost == 0.0:
            converged = True
            break
    return PixelFit(_to_params(u), cost, init_cost, converged, it)


# -- maps -------------------------------------------------------------------

def pre_bolus_frames(aif) -> int:
    """Number of leading frames before the AIF leaves zero (at least one)."""
    aif = np.asarray(aif)
    nz = np.flatnonzero(aif > 0)
    return max(1, int(nz[0]) if nz.size else len(aif))


def fit_maps(seq, masks, aif, t, baseline=None, mode: str = "linear", scale: float = 1.0,
             init=POPULATION_INIT, **signal_kw) -> PerfusionMaps:
    """Fit every pixel inside ``masks``.

    The magnitude of the sequence is converted to concentration using
    ``baseline`` (by default the mean over the pre-bolus frames).  Pixels
    that do not converge from ``init`` are refitted once from the fit of
    their ROI-mean curve, keeping the better of the two.  Pixels outside
    all masks are NaN.
    """
    data = seq.data if isinstance(seq, ImageSequence) else np.asarray(seq)
    mag = np.abs(data)
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.shape[1:] != mag.shape[1:]:
        raise ValueError(f"masks {masks.shape[1:]} do not match images {mag.shape[1:]}")
    aif = np.asarray(aif, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if baseline is None:
        baseline = mag[:pre_bolus_frames(aif)].mean(axis=0)
    conc, _ = to_concentration(mag, baseline, mode, scale, **signal_kw)

    shape = mag.shape[1:]
    out = {n: np.full(shape, np.nan) for n in PARAM_NAMES}
    residual = np.full(shape, np.nan)
    converged = np.zeros(shape, dtype=bool)
    for mask in masks:
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            continue
        roi_fit = None
        for y, x in zip(ys, xs):
            fit = fit_pixel(conc[:, y, x], aif, t, init)
            if not fit.converged and np.any(conc[:, y, x]):
                if roi_fit is None:
                    roi_fit = fit_pixel(conc[:, ys, xs].mean(axis=1), aif, t, init)
                retry = fit_pixel(conc[:, y, x], aif, t, roi_fit.params)
                if retry.residual < fit.residual or (retry.converged and
                                                     retry.residual <= fit.residual):
                    fit = retry
            for n, v in zip(PARAM_NAMES, fit.params):
                out[n][y, x] = v
            residual[y, x] = fit.residual
            converged[y, x] = fit.converged
    ktrans, ps = derive_params(SimpleNamespace(Fp=out["Fp"], E=out["E"]))
    return PerfusionMaps(**out, Ktrans=ktrans, PS=ps, residual=residual, converged=converged)


# -- reports ----------------------------------------------------------------

@dataclass
class RoiReport:
    """Mean relative error in percent, keyed by ``(roi, parameter)``."""

    errors: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    roi_names: tuple = ()

    def get(self, roi: int, name: str) -> float:
        return self.errors[(roi, name)]

    def difference(self, other: "RoiReport") -> dict:
        """``self - other`` in percentage points."""
        return {k: v - other.errors[k] for k, v in self.errors.items() if k in other.errors}

    def rows(self):
        for (roi, name), v in self.errors.items():
            label = self.roi_names[roi - 1] if self.roi_names else str(roi)
            yield label, name, v

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["roi", "parameter", "mean_rel_err_pct"])
            for label, name, v in self.rows():
                w.writerow([label, name, format(v, ".17g")])


def roi_relative_error(est: PerfusionMaps, ref: PerfusionMaps, masks, names=MAP_NAMES,
                       roi_names=()) -> RoiReport:
    """Mean of ``|est - ref| / |ref|`` over each ROI, in percent.

    Pixels with ``|ref| < 1e-12`` are left out and counted in ``excluded``.
    ROIs are numbered from 1.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    report = RoiReport(roi_names=tuple(roi_names))
    for i, mask in enumerate(masks, start=1):
        for name in names:
            e = np.asarray(est.get(name))[mask]
            r = np.asarray(ref.get(name))[mask]
            keep = np.abs(r) >= 1e-12
            report.excluded[(i, name)] = int(np.count_nonzero(~keep))
            if not np.any(keep):
                raise ValueError(f"ROI {i} has no usable reference pixels for {name}")
            report.errors[(i, name)] = float(100.0 * np.mean(np.abs(e[keep] - r[keep])
                                                             / np.abs(r[keep])))
    return report
