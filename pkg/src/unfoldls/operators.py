"""Linear operators of the L+S reconstruction problem.

``EncodingOperator`` maps an image sequence to multi-coil radial k-space by
weighting each frame with the coil maps and evaluating the exact nonuniform
DFT ``sum_r x(r) exp(-2j*pi*k.r) / sqrt(nx*ny)`` at the spokes binned into
that frame.  Pixel coordinates are centred: ``x = -nx//2 .. nx - nx//2 - 1``.

Its normal operator ``A^H A`` is applied through a Toeplitz embedding: the
point-spread kernel of every frame is computed by direct summation over the
samples and convolved with a zero-padded FFT of size ``(2ny, 2nx)``.  This is
exact (no gridding or interpolation) and much cheaper than ``adjoint(forward(x))``.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from .data import CoilSensitivities, ImageSequence, KSpaceDataset


def _centred(n: int) -> np.ndarray:
    return np.arange(n) - n // 2


class EncodingOperator:
    """Coil-sensitivity-aware radial encoding with frame binning.

    Parameters
    ----------
    sens : CoilSensitivities
        Coil maps, shape ``(ncoils, ny, nx)``.
    traj : ndarray, shape (nspokes, nread, 2)
        k-space coordinates in cycles/pixel.
    binning : ndarray of int, shape (nspokes,)
        Frame of each spoke, non-decreasing, covering ``0 .. nt-1``.
    nt : int, optional
        Number of frames; defaults to ``binning[-1] + 1``.
    """

    def __init__(self, sens: CoilSensitivities, traj, binning, nt: int | None = None):
        traj = np.asarray(traj, dtype=np.float64)
        binning = np.asarray(binning, dtype=np.int64)
        if traj.ndim != 3 or traj.shape[2] != 2 or traj.shape[0] != binning.shape[0]:
            raise ValueError(f"traj {traj.shape} and binning {binning.shape} disagree")
        nt = int(binning[-1]) + 1 if nt is None else int(nt)
        if np.any(np.diff(binning) < 0):
            raise ValueError("binning must be non-decreasing")
        counts = np.bincount(binning, minlength=nt)
        if counts.shape[0] != nt or np.any(counts == 0):
            raise ValueError(f"binning must populate every frame 0..{nt - 1}")
        self.sens = sens.maps
        self.ncoils, self.ny, self.nx = self.sens.shape
        self.nt = nt
        self.traj = traj
        self.binning = binning
        self.nspokes, self.nread = traj.shape[:2]
        bounds = np.concatenate([[0], np.cumsum(counts)])
        self._frames = [slice(bounds[f], bounds[f + 1]) for f in range(nt)]
        self._scale = 1.0 / np.sqrt(self.nx * self.ny)
        self._xs = _centred(self.nx)
        self._ys = _centred(self.ny)
        self._kernels = None

    @classmethod
    def from_dataset(cls, sens: CoilSensitivities, data: KSpaceDataset, nt: int | None = None):
        return cls(sens, data.traj, data.binning, nt)

    @property
    def ishape(self) -> tuple[int, int, int]:
        return (self.nt, self.ny, self.nx)

    @property
    def oshape(self) -> tuple[int, int, int]:
        return (self.ncoils, self.nspokes, self.nread)

    def _phases(self, f: int, sign: float):
        k = self.traj[self._frames[f]].reshape(-1, 2)
        ex = np.exp(sign * 2j * np.pi * np.outer(k[:, 0], self._xs))
        ey = np.exp(sign * 2j * np.pi * np.outer(k[:, 1], self._ys))
        return ex, ey

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape != self.ishape:
            raise ValueError(f"expected image shape {self.ishape}, got {x.shape}")
        out = np.empty(self.oshape, dtype=np.complex128)
        for f, sl in enumerate(self._frames):
            ex, ey = self._phases(f, -1.0)
            coil_imgs = self.sens * x[f]
            partial = coil_imgs @ ex.T                      # (c, ny, s)
            vals = np.einsum("cys,sy->cs", partial, ey)
            out[:, sl, :] = vals.reshape(self.ncoils, -1, self.nread) * self._scale
        return out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        if y.shape != self.oshape:
            raise ValueError(f"expected k-space shape {self.oshape}, got {y.shape}")
        out = np.empty(self.ishape, dtype=np.complex128)
        sens_conj = self.sens.conj()
        for f, sl in enumerate(self._frames):
            ex, ey = self._phases(f, 1.0)
            vals = y[:, sl, :].reshape(self.ncoils, -1)     # (c, s)
            weighted = ey.T[None, :, :] * vals[:, None, :]  # (c, ny, s)
            coil_imgs = weighted @ ex                       # (c, ny, nx)
            out[f] = np.sum(sens_conj * coil_imgs, axis=0) * self._scale
        return out

    def _build_kernels(self) -> np.ndarray:
        ny, nx = self.ny, self.nx
        dx = np.arange(2 * nx)
        dx = np.where(dx < nx, dx, dx - 2 * nx)
        dy = np.arange(2 * ny)
        dy = np.where(dy < ny, dy, dy - 2 * ny)
        kernels = np.empty((self.nt, 2 * ny, 2 * nx), dtype=np.complex128)
        for f, sl in enumerate(self._frames):
            k = self.traj[sl].reshape(-1, 2)
            ex = np.exp(2j * np.pi * np.outer(k[:, 0], dx))
            ey = np.exp(2j * np.pi * np.outer(k[:, 1], dy))
            # lags of +-n never occur between pixels of an n-wide grid
            ex[:, nx] = 0.0
            ey[:, ny] = 0.0
            psf = (ey.T @ ex) * (self._scale ** 2)
            kernels[f] = sfft.fft2(psf)
        return kernels

    def normal(self, x: np.ndarray) -> np.ndarray:
        """Apply ``A^H A`` frame by frame; exact up to FFT rounding."""
        if self._kernels is None:
            self._kernels = self._build_kernels()
        ny, nx = self.ny, self.nx
        padded = np.zeros((self.nt, self.ncoils, 2 * ny, 2 * nx), dtype=np.complex128)
        padded[:, :, :ny, :nx] = self.sens[None] * x[:, None]
        spec = sfft.fft2(padded, overwrite_x=True)
        spec *= self._kernels[:, None]
        conv = sfft.ifft2(spec, overwrite_x=True)[:, :, :ny, :nx]
        return np.einsum("cyx,tcyx->tyx", self.sens.conj(), conv)


class TemporalDiff:
    """Non-circular forward differences along time, ``nt - 1`` outputs per pixel."""

    def __init__(self, nt: int, spatial: tuple[int, ...] = ()):
        if nt < 2:
            raise ValueError("temporal differences need at least two frames")
        self.nt = int(nt)
        self.ishape = (self.nt,) + tuple(spatial)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x[1:] - x[:-1]

    def adjoint(self, d: np.ndarray) -> np.ndarray:
        out = np.empty((d.shape[0] + 1,) + d.shape[1:], dtype=np.result_type(d, np.float64))
        out[0] = -d[0]
        out[1:-1] = d[:-1] - d[1:]
        out[-1] = d[-1]
        return out

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))

    def norm(self) -> float:
        """Largest singular value of the first-difference matrix, in closed form."""
        return 2.0 * np.cos(np.pi / (2 * self.nt))


class Identity:
    def __init__(self, shape):
        self.ishape = tuple(shape)

    def forward(self, x):
        return x

    adjoint = forward
    normal = forward


def forward(op: EncodingOperator, seq: ImageSequence) -> KSpaceDataset:
    if seq.shape != op.ishape:
        raise ValueError(f"sequence shape {seq.shape} does not match operator {op.ishape}")
    return KSpaceDataset(op.forward(seq.data), op.traj, op.binning)


def adjoint(op: EncodingOperator, y: KSpaceDataset) -> ImageSequence:
    if y.samples.shape != op.oshape:
        raise ValueError(f"k-space shape {y.samples.shape} does not match operator {op.oshape}")
    return ImageSequence(op.adjoint(y.samples))


def tdiff(seq: ImageSequence) -> np.ndarray:
    return TemporalDiff(seq.nt).forward(seq.data)


def tdiff_adjoint(diffs: np.ndarray) -> ImageSequence:
    return ImageSequence(TemporalDiff(diffs.shape[0] + 1).adjoint(diffs))


def op_norm(op, n_iter: int = 50, seed: int = 0, shape=None) -> float:
    """Estimate the largest singular value by power iteration on ``op.normal``.

    The returned value is ``sqrt(x^H A^H A x / x^H x)`` at the last iterate,
    which never decreases with ``n_iter`` for a fixed seed.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    shape = op.ishape if shape is None else shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(n_iter):
        y = op.normal(x)
        est = max(float(np.real(np.vdot(x, y))), 0.0)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
    return float(np.sqrt(est))
