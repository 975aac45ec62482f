"""Desk-scale DCE-MRI simulator.

A parametric head phantom with four perfusion ROIs (two temporal muscles, the
tongue and a brain tumor) is driven by adiabatic tissue-homogeneity (ATH)
curves, encoded with golden-angle radial spokes over four synthetic coils and
decimated in time as a stack-of-stars acquisition would be.

Units: F_p in mL/min/mL, times in seconds, E and v_e dimensionless.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import CoilSensitivities, ImageSequence, KSpaceDataset
from .operators import EncodingOperator, op_norm

GOLDEN_ANGLE_DEG = 180.0 * (math.sqrt(5.0) - 1.0) / 2.0
PARAM_NAMES = ("Fp", "E", "Tc", "ve")
MAP_NAMES = ("Fp", "E", "Tc", "ve", "Ktrans", "PS")


class ConfigError(ValueError):
    """Inconsistent phantom or acquisition configuration."""


@dataclass(frozen=True)
class Perfusion:
    Fp: float
    E: float
    Tc: float
    ve: float

    def __post_init__(self):
        if not (self.Fp > 0 and self.Tc > 0 and self.ve > 0 and 0 <= self.E < 1):
            raise ConfigError(f"invalid perfusion record {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.Fp, self.E, self.Tc, self.ve])


@dataclass(frozen=True)
class Roi:
    name: str
    center: tuple[float, float]
    axes: tuple[float, float]
    rotation: float
    baseline: float
    perfusion: Perfusion


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipse phantom.  Positions are in pixels relative to the image centre."""

    nx: int = 32
    ny: int = 32
    rois: tuple[Roi, ...] = ()
    background: float = 0.03
    head_axes: tuple[float, float] = (14.0, 12.5)
    dt: float = 0.96
    nt_full: int = 64

    def __post_init__(self):
        for roi in self.rois:
            cx, cy = roi.center
            reach = max(roi.axes)
            if abs(cx) + reach > self.nx / 2 or abs(cy) + reach > self.ny / 2:
                raise ConfigError(f"ROI {roi.name} leaves the image")


def default_phantom(nx: int = 32, ny: int = 32, dt: float = 0.96, nt_full: int = 64) -> PhantomSpec:
    """Four ROIs numbered as in the evaluation: 1/2 temporal muscles, 3 tongue, 4 tumor."""
    s = nx / 32.0
    rois = (
        Roi("left_muscle", (-9.5 * s, -3.0 * s), (2.5 * s, 4.5 * s), 15.0, 0.040,
            Perfusion(Fp=0.15, E=0.35, Tc=6.0, ve=0.12)),
        Roi("right_muscle", (9.5 * s, -3.0 * s), (2.5 * s, 4.5 * s), -15.0, 0.040,
            Perfusion(Fp=0.18, E=0.30, Tc=7.0, ve=0.10)),
        Roi("tongue", (0.0, 7.5 * s), (4.5 * s, 2.5 * s), 0.0, 0.035,
            Perfusion(Fp=0.30, E=0.30, Tc=5.0, ve=0.20)),
        Roi("tumor", (3.5 * s, -4.0 * s), (3.0 * s, 2.5 * s), 30.0, 0.030,
            Perfusion(Fp=0.60, E=0.20, Tc=4.0, ve=0.35)),
    )
    return PhantomSpec(nx=nx, ny=ny, rois=rois, head_axes=(14.0 * s, 12.5 * s), dt=dt,
                       nt_full=nt_full)


def jitter_phantom(spec: PhantomSpec, rng: np.random.Generator, rel: float = 0.2,
                   shift: float = 1.0) -> PhantomSpec:
    """Random variant of ``spec``: perfusion values scaled by U(1-rel, 1+rel), ROIs moved."""
    rois = []
    for roi in spec.rois:
        p = roi.perfusion
        f = rng.uniform(1 - rel, 1 + rel, size=4)
        pert = Perfusion(Fp=p.Fp * f[0], E=min(p.E * f[1], 0.95), Tc=p.Tc * f[2], ve=p.ve * f[3])
        dx, dy = rng.uniform(-shift, shift, size=2)
        rois.append(replace(roi, center=(roi.center[0] + dx, roi.center[1] + dy), perfusion=pert))
    return replace(spec, rois=tuple(rois))


def ellipse_mask(nx, ny, center, axes, rotation_deg=0.0) -> np.ndarray:
    x = np.arange(nx) - nx // 2
    y = np.arange(ny) - ny // 2
    X, Y = np.meshgrid(x, y)
    th = np.deg2rad(rotation_deg)
    u = (X - center[0]) * np.cos(th) + (Y - center[1]) * np.sin(th)
    v = -(X - center[0]) * np.sin(th) + (Y - center[1]) * np.cos(th)
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def roi_masks(spec: PhantomSpec) -> np.ndarray:
    """Boolean masks ``(n_roi, ny, nx)``; later ROIs win where ellipses overlap."""
    masks = np.zeros((len(spec.rois), spec.ny, spec.nx), dtype=bool)
    taken = np.zeros((spec.ny, spec.nx), dtype=bool)
    for i in reversed(range(len(spec.rois))):
        roi = spec.rois[i]
        m = ellipse_mask(spec.nx, spec.ny, roi.center, roi.axes, roi.rotation) & ~taken
        masks[i] = m
        taken |= m
    return masks


# -- pharmacokinetics -------------------------------------------------------

def ath_residue(t, p: Perfusion):
    """ATH impulse residue: 1 on ``[0, Tc)``, then ``E * exp(-E*Fp/ve * (t - Tc))``.

    ``Fp`` is converted from per-minute to per-second.  Zero for ``t < 0``.
    """
    t = np.asarray(t, dtype=np.float64)
    rate = p.E * (p.Fp / 60.0) / p.ve
    tail = p.E * np.exp(-rate * np.maximum(t - p.Tc, 0.0))
    return np.where(t < 0, 0.0, np.where(t < p.Tc, 1.0, tail))


def derive_params(p) -> tuple[float, float]:
    """``K_trans = E*Fp`` and ``PS = -Fp*ln(1-E)`` (same flow units as ``Fp``)."""
    Fp, E = np.asarray(p.Fp, dtype=np.float64), np.asarray(p.E, dtype=np.float64)
    return E * Fp, -Fp * np.log1p(-E)


def aif(t, t0: float = 5.0, a: float = 2.0, b: float = 4.0, peak: float = 1.0):
    """Delayed gamma-variate ``A (t-t0)^a exp(-(t-t0)/b)`` scaled to ``peak`` at ``t0 + a*b``."""
    t = np.asarray(t, dtype=np.float64)
    s = np.maximum(t - t0, 0.0)
    amp = peak / ((a * b) ** a * math.exp(-a))
    return np.where(t > t0, amp * s ** a * np.exp(-s / b), 0.0)


def _phi(rate, h):
    """``int_0^h e^{-rate (h-s)} ds`` and ``int_0^h s e^{-rate (h-s)} ds``."""
    h = np.asarray(h, dtype=np.float64)
    x = rate * h
    small = np.abs(x) < 1e-4
    with np.errstate(divide="ignore", invalid="ignore"):
        phi1 = np.where(small, h * (1 - x / 2 + x * x / 6), -np.expm1(-x) / rate)
        phi2 = np.where(small, h * h * (0.5 - x / 6 + x * x / 24), (h - phi1) / rate)
    return phi1, phi2


class _LinearInput:
    """Piecewise-linear interpolant of sampled values, zero before the first sample.

    Provides exact running integrals against 1 and against ``exp(-rate*(u-v))``.
    """

    def __init__(self, t, a):
        self.t = np.asarray(t, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.float64)
        h = np.diff(self.t)
        if np.any(h <= 0):
            raise ValueError("time grid must be strictly increasing")
        self.h = h
        self.slope = np.diff(self.a) / h
        self.cum = np.concatenate([[0.0], np.cumsum(0.5 * (self.a[1:] + self.a[:-1]) * h)])

    def _locate(self, u):
        k = np.clip(np.searchsorted(self.t, u, side="right") - 1, 0, len(self.t) - 2)
        return k, u - self.t[k]

    def integral(self, u):
        u = np.asarray(u, dtype=np.float64)
        k, w = self._locate(u)
        val = self.cum[k] + self.a[k] * w + 0.5 * self.slope[k] * w * w
        return np.where(u <= self.t[0], 0.0, val)

    def exp_conv(self, u, rate):
        u = np.asarray(u, dtype=np.float64)
        nodes = np.zeros(len(self.t))
        p1, p2 = _phi(rate, self.h)
        decay = np.exp(-rate * self.h)
        inc = self.a[:-1] * p1 + self.slope * p2
        for j in range(len(self.h)):
            nodes[j + 1] = decay[j] * nodes[j] + inc[j]
        k, w = self._locate(u)
        # times before t[0] are masked below; clamp so they cannot overflow
        w = np.maximum(w, 0.0)
        q1, q2 = _phi(rate, w)
        val = np.exp(-rate * w) * nodes[k] + self.a[k] * q1 + self.slope[k] * q2
        return np.where(u <= self.t[0], 0.0, val)


def tissue_curve(p: Perfusion, aif_samples, t):
    """Tissue concentration ``Fp * (AIF * R)(t)`` on the grid ``t``.

    The AIF is taken as the piecewise-linear interpolant of ``aif_samples``
    on ``t`` (zero before ``t[0]``) and convolved exactly with the ATH
    residue, which keeps the curve smooth in ``Tc``.
    """
    t = np.asarray(t, dtype=np.float64)
    inp = _LinearInput(t, aif_samples)
    flow = p.Fp / 60.0
    rate = p.E * flow / p.ve
    shifted = t - p.Tc
    plateau = inp.integral(t) - inp.integral(shifted)
    tail = p.E * inp.exp_conv(shifted, rate)
    return flow * (plateau + tail)


def signal_model(C, baseline, mode: str = "linear", scale: float = 1.0, tr: float = 7.5e-3,
                 fa_deg: float = 20.0, r10: float = 1.0 / 1.4, r1: float = 4.5):
    """Signal intensity from concentration.

    ``linear``: ``baseline + scale * C``.  ``spgr``: steady-state spoiled
    gradient echo with ``R1 = r10 + r1 * C``, normalised so that ``C = 0``
    gives ``baseline``.
    """
    C = np.asarray(C, dtype=np.float64)
    if mode == "linear":
        return baseline + scale * C
    if mode == "spgr":
        return baseline * _spgr_unit(C, tr, fa_deg, r10, r1) / _spgr_unit(0.0, tr, fa_deg, r10, r1)
    raise ValueError(f"unknown signal mode {mode!r}")


def _spgr_unit(C, tr, fa_deg, r10, r1):
    fa = np.deg2rad(fa_deg)
    e1 = np.exp(-tr * (r10 + r1 * np.asarray(C, dtype=np.float64)))
    return np.sin(fa) * (1 - e1) / (1 - np.cos(fa) * e1)


# -- acquisition ------------------------------------------------------------

def golden_angles(nspokes: int) -> np.ndarray:
    """Spoke angles in degrees, ``i * 180 * (sqrt(5) - 1) / 2 mod 180``."""
    return np.mod(np.arange(nspokes) * GOLDEN_ANGLE_DEG, 180.0)


def golden_trajectory(nspokes: int, nread: int) -> np.ndarray:
    """Radial spokes ``(nspokes, nread, 2)`` with samples uniform in ``[-0.5, 0.5)``."""
    th = np.deg2rad(golden_angles(nspokes))
    r = np.arange(nread) / nread - 0.5
    return np.stack([np.outer(np.cos(th), r), np.outer(np.sin(th), r)], axis=-1)


def synth_sensitivities(ncoils: int, nx: int, ny: int, width: float = 0.6) -> CoilSensitivities:
    """Gaussian lobes centred on the image border at equal angles, sum of squares = 1.

    ``width`` is the lobe standard deviation as a fraction of the image size.
    Each coil carries a smooth linear phase so the maps are genuinely complex.
    """
    x = (np.arange(nx) - nx // 2) / nx
    y = (np.arange(ny) - ny // 2) / ny
    X, Y = np.meshgrid(x, y)
    maps = np.empty((ncoils, ny, nx), dtype=np.complex128)
    for c in range(ncoils):
        phi = 2 * np.pi * c / ncoils
        cx, cy = 0.5 * np.cos(phi), 0.5 * np.sin(phi)
        mag = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * width ** 2))
        phase = phi + np.pi * (X * np.sin(phi) - Y * np.cos(phi))
        maps[c] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSensitivities(maps)


@dataclass(frozen=True)
class AcquisitionConfig:
    """Golden-angle radial stack-of-stars acquisition.

    ``spokes_total`` counts projections over all slices; the simulated slice
    sees ``spokes_total / decimation`` of them, grouped ``spokes_per_frame``
    to a frame, so one frame lasts ``spokes_per_frame * decimation * tr``.
    ``te`` is kept for completeness; no T2* decay is modelled.
    """

    ncoils: int = 4
    nread: int | None = None
    spokes_total: int = 8192
    spokes_per_frame: int = 8
    decimation: int = 16
    tr: float = 7.5e-3
    te: float = 1.6e-3
    fa_deg: float = 20.0
    noise_sigma: float = 1e-3
    signal_mode: str = "linear"
    signal_scale: float = 1.0
    gt_ridge: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.spokes_total % self.spokes_per_frame:
            raise ConfigError("spokes_total must be divisible by spokes_per_frame")
        if self.spokes_total % (self.spokes_per_frame * self.decimation):
            raise ConfigError("spokes_total must split into whole decimated frames")

    @property
    def nspokes(self) -> int:
        return self.spokes_total // self.decimation

    @property
    def nt(self) -> int:
        return self.nspokes // self.spokes_per_frame

    @property
    def frame_period(self) -> float:
        return self.spokes_per_frame * self.decimation * self.tr


def desk_acquisition(nt: int = 64, **kw) -> AcquisitionConfig:
    spf = kw.pop("spokes_per_frame", 8)
    dec = kw.pop("decimation", 16)
    return AcquisitionConfig(spokes_total=nt * spf * dec, spokes_per_frame=spf, decimation=dec, **kw)


def frame_times(nt: int, dt: float) -> np.ndarray:
    """Mid-frame acquisition times."""
    return (np.arange(nt) + 0.5) * dt


@dataclass
class PerfusionMaps:
    """Per-pixel parameter maps ``(ny, nx)``; NaN outside the fitted support."""

    Fp: np.ndarray
    E: np.ndarray
    Tc: np.ndarray
    ve: np.ndarray
    Ktrans: np.ndarray
    PS: np.ndarray
    residual: np.ndarray | None = None
    converged: np.ndarray | None = None

    def get(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def stack(self) -> np.ndarray:
        return np.stack([self.get(n) for n in MAP_NAMES])


@dataclass
class SimulatedDataset:
    kspace: KSpaceDataset
    ground_truth: ImageSequence
    phantom_frames: ImageSequence
    maps: PerfusionMaps
    masks: np.ndarray
    sens: CoilSensitivities
    times: np.ndarray
    aif: np.ndarray
    baseline: np.ndarray
    phantom: PhantomSpec = field(repr=False)
    acq: AcquisitionConfig = field(repr=False)

    def operator(self) -> EncodingOperator:
        return EncodingOperator.from_dataset(self.sens, self.kspace, self.ground_truth.nt)

    def manifest(self) -> dict:
        fields = {f"acq.{k}": v for k, v in asdict(self.acq).items()}
        ph = self.phantom
        fields.update({"phantom.nx": ph.nx, "phantom.ny": ph.ny, "phantom.dt": repr(ph.dt),
                       "phantom.nt_full": ph.nt_full, "phantom.background": repr(ph.background)})
        for i, roi in enumerate(ph.rois, start=1):
            p = roi.perfusion
            fields[f"roi{i}"] = (f"{roi.name} center={roi.center!r} axes={roi.axes!r} "
                                 f"rot={roi.rotation!r} baseline={roi.baseline!r} "
                                 f"Fp={p.Fp!r} E={p.E!r} Tc={p.Tc!r} ve={p.ve!r}")
        return fields


def render_sequence(spec: PhantomSpec, times, aif_samples, mode="linear", scale=1.0,
                    tr=7.5e-3, fa_deg=20.0):
    """Noise-free phantom frames ``(nt, ny, nx)`` plus per-pixel baseline and maps."""
    nt = len(times)
    head = ellipse_mask(spec.nx, spec.ny, (0.0, 0.0), spec.head_axes)
    baseline = np.where(head, spec.background, 0.0)
    frames = np.repeat(baseline[None], nt, axis=0)
    maps = {n: np.full((spec.ny, spec.nx), np.nan) for n in MAP_NAMES}
    masks = roi_masks(spec)
    for roi, mask in zip(spec.rois, masks):
        p = roi.perfusion
        curve = signal_model(tissue_curve(p, aif_samples, times), roi.baseline, mode, scale,
                             tr=tr, fa_deg=fa_deg)
        frames[:, mask] = curve[:, None]
        baseline[mask] = roi.baseline
        ktrans, ps = derive_params(p)
        for name, val in zip(MAP_NAMES, (p.Fp, p.E, p.Tc, p.ve, ktrans, ps)):
            maps[name][mask] = val
    return frames, baseline, PerfusionMaps(**maps), masks


def _noise(shape, sigma, seed) -> np.ndarray:
    """Complex Gaussian noise; one Philox substream per (coil, spoke)."""
    ncoils, nspokes, nread = shape
    out = np.empty(shape, dtype=np.complex128)
    for c in range(ncoils):
        for s in range(nspokes):
            bitgen = np.random.Philox(key=seed, counter=[0, c * nspokes + s, 0, 0])
            g = np.random.Generator(bitgen).standard_normal(2 * nread)
            out[c, s] = sigma * (g[:nread] + 1j * g[nread:])
    return out


def simulate_dataset(spec: PhantomSpec | None = None, acq: AcquisitionConfig | None = None,
                     sens: CoilSensitivities | None = None) -> SimulatedDataset:
    """Phantom to noisy undersampled k-space plus ground truth and true maps.

    The k-space samples encode the rendered phantom.  The ground truth is
    the noise-free fully-sampled reconstruction of the same phantom (see
    :func:`fully_sampled_reconstruction`), which lacks the k-space corners
    no radial acquisition can see.  The rendered frames are kept as
    ``phantom_frames``.
    """
    spec = default_phantom() if spec is None else spec
    acq = desk_acquisition(spec.nt_full) if acq is None else acq
    if acq.nt != spec.nt_full:
        raise ConfigError(f"acquisition yields {acq.nt} frames, phantom expects {spec.nt_full}")
    if not math.isclose(acq.frame_period, spec.dt, rel_tol=1e-9):
        raise ConfigError(f"frame period {acq.frame_period} s differs from phantom dt {spec.dt} s")
    nread = acq.nread or 2 * spec.nx
    times = frame_times(spec.nt_full, spec.dt)
    aif_samples = aif(times)
    frames, baseline, maps, masks = render_sequence(spec, times, aif_samples, acq.signal_mode,
                                                    acq.signal_scale, acq.tr, acq.fa_deg)
    sens = synth_sensitivities(acq.ncoils, spec.nx, spec.ny) if sens is None else sens
    gt = fully_sampled_reconstruction(frames, sens, acq.gt_ridge)
    traj = golden_trajectory(acq.nspokes, nread)
    binning = np.arange(acq.nspokes) // acq.spokes_per_frame
    op = EncodingOperator(sens, traj, binning, spec.nt_full)
    samples = op.forward(frames)
    if acq.noise_sigma > 0:
        samples = samples + _noise(samples.shape, acq.noise_sigma, acq.seed)
    kspace = KSpaceDataset(samples, traj, binning)
    return SimulatedDataset(kspace=kspace, ground_truth=gt, phantom_frames=ImageSequence(frames),
                            maps=maps, masks=masks, sens=sens, times=times, aif=aif_samples,
                            baseline=baseline, phantom=spec, acq=acq)


def simulate_collection(n: int, seed: int, spec: PhantomSpec | None = None,
                        acq: AcquisitionConfig | None = None) -> list[SimulatedDataset]:
    """``n`` jittered phantoms with independent noise, all sharing trajectory and coils."""
    spec = default_phantom() if spec is None else spec
    acq = desk_acquisition(spec.nt_full) if acq is None else acq
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        variant = jitter_phantom(spec, rng)
        out.append(simulate_dataset(variant, replace(acq, seed=seed * 1000 + i)))
    return out


def full_sampling_operator(sens: CoilSensitivities, nspokes: int | None = None,
                           nread: int | None = None) -> EncodingOperator:
    """Single-frame operator with ``ceil(pi * n)`` golden-angle spokes, twice radial Nyquist."""
    nread = nread or 2 * sens.nx
    nspokes = nspokes or int(math.ceil(math.pi * max(sens.nx, sens.ny)))
    return EncodingOperator(sens, golden_trajectory(nspokes, nread), np.zeros(nspokes, int), 1)


def _ridge_cg(op: EncodingOperator, rhs, shift: float, n_iter: int, tol: float) -> np.ndarray:
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = np.vdot(r, r).real
    stop = tol ** 2 * rs
    for _ in range(n_iter):
        if rs <= stop:
            break
        Ap = op.normal(p) + shift * p
        alpha = rs / np.vdot(p, Ap).real
        x += alpha * p
        r -= alpha * Ap
        rs_new = np.vdot(r, r).real
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def fully_sampled_reconstruction(seq, sens: CoilSensitivities, ridge: float = 1e-3,
                                 nspokes: int | None = None, nread: int | None = None,
                                 n_iter: int = 2000, tol: float = 1e-12) -> ImageSequence:
    """Noise-free fully-sampled reconstruction of every frame of ``seq``.

    Solves ``(A^H A + ridge * ||A||^2 I) x = A^H A x_true`` with the operator of
    :func:`full_sampling_operator`.  Radial spokes never reach the k-space
    corners, so ``A^H A`` is singular on the square pixel grid; the ridge
    removes those unobservable directions instead of leaving them to the
    solver.  The map is linear and identical for all frames, so it is applied
    to a basis of the Casorati column space only.
    """
    data = seq.data if isinstance(seq, ImageSequence) else np.asarray(seq)
    nt, ny, nx = data.shape
    op = full_sampling_operator(sens, nspokes, nread)
    shift = ridge * op_norm(op, n_iter=100) ** 2
    C = data.reshape(nt, -1).T
    U, sigma, Vh = np.linalg.svd(C, full_matrices=False)
    keep = sigma > 1e-13 * sigma[0] if sigma.size and sigma[0] > 0 else np.zeros(0, bool)
    basis = np.empty((ny * nx, int(keep.sum())), dtype=np.complex128)
    for i in range(basis.shape[1]):
        img = U[:, i].reshape(1, ny, nx)
        basis[:, i] = _ridge_cg(op, op.normal(img), shift, n_iter, tol).ravel()
    out = (basis * sigma[keep]) @ Vh[keep]
    return ImageSequence(out.T.reshape(nt, ny, nx))
