"""Array containers shared by every part of the package.

Image sequences are stored as numpy arrays of shape ``(nt, ny, nx)`` so that
C-order flattening puts x fastest, then y, then t.  The Casorati matrix of a
sequence has one row per pixel (``p = x + nx * y``) and one column per frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# float32 file storage rounds |k| = 0.5 by up to ~3e-8
_K_TOL = 1e-6


class NumericalError(ArithmeticError):
    """Raised when an iterate or intermediate becomes non-finite."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageSequence:
    """Complex dynamic image stack, ``data[t, y, x]``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"ImageSequence needs a non-empty 3-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("ImageSequence data contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data.astype(np.complex128, copy=False)))

    @property
    def nt(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, nx: int, ny: int, nt: int) -> "ImageSequence":
        return cls(np.zeros((nt, ny, nx), dtype=np.complex128))

    def casorati(self) -> "CasoratiView":
        return to_casorati(self)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class CasoratiView:
    """Pixels-by-frames matrix of an image sequence plus the layout to undo it."""

    matrix: np.ndarray
    nx: int
    ny: int

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]


def casorati_matrix(x: np.ndarray) -> np.ndarray:
    """``(nt, ny, nx)`` array to ``(nx*ny, nt)`` matrix; a view when possible."""
    nt = x.shape[0]
    return x.reshape(nt, -1).T


def casorati_unfold(mat: np.ndarray, nx: int, ny: int) -> np.ndarray:
    return mat.T.reshape(mat.shape[1], ny, nx)


def to_casorati(seq: ImageSequence) -> CasoratiView:
    return CasoratiView(casorati_matrix(seq.data), seq.nx, seq.ny)


def from_casorati(view: CasoratiView) -> ImageSequence:
    if view.rows != view.nx * view.ny:
        raise ValueError(f"Casorati matrix has {view.rows} rows, layout needs {view.nx * view.ny}")
    return ImageSequence(casorati_unfold(view.matrix, view.nx, view.ny))


@dataclass(frozen=True, eq=False)
class KSpaceDataset:
    """Radial multi-coil samples.

    Attributes
    ----------
    samples : ndarray, complex, shape (ncoils, nspokes, nread)
    traj : ndarray, float, shape (nspokes, nread, 2)
        ``(kx, ky)`` in cycles/pixel, inside the disc ``|k| <= 0.5``.
    binning : ndarray, int, shape (nspokes,)
        Frame index of every spoke; non-decreasing, every frame populated.
    """

    samples: np.ndarray
    traj: np.ndarray
    binning: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples)
        traj = np.asarray(self.traj, dtype=np.float64)
        binning = np.asarray(self.binning)
        if samples.ndim != 3:
            raise ValueError(f"samples must be (ncoils, nspokes, nread), got {samples.shape}")
        if traj.shape != samples.shape[1:] + (2,):
            raise ValueError(f"traj shape {traj.shape} does not match samples {samples.shape}")
        if binning.shape != (samples.shape[1],):
            raise ValueError("binning needs one frame index per spoke")
        if not np.all(np.isfinite(samples)) or not np.all(np.isfinite(traj)):
            raise ValueError("KSpaceDataset contains NaN or Inf")
        if np.any(np.hypot(traj[..., 0], traj[..., 1]) > 0.5 + _K_TOL):
            raise ValueError("trajectory leaves the Nyquist disc |k| <= 0.5")
        if not np.array_equal(binning, np.round(binning)):
            raise ValueError("binning must hold integer frame indices")
        binning = binning.astype(np.int64)
        if binning.size and (binning[0] != 0 or np.any(np.diff(binning) < 0)
                             or np.any(np.diff(binning) > 1)):
            raise ValueError("binning must be non-decreasing from frame 0 with no empty frame")
        object.__setattr__(self, "samples", _frozen(samples.astype(np.complex128, copy=False)))
        object.__setattr__(self, "traj", _frozen(traj))
        object.__setattr__(self, "binning", _frozen(binning))

    @property
    def ncoils(self) -> int:
        return self.samples.shape[0]

    @property
    def nspokes(self) -> int:
        return self.samples.shape[1]

    @property
    def nread(self) -> int:
        return self.samples.shape[2]

    @property
    def nframes(self) -> int:
        return int(self.binning[-1]) + 1

    def with_samples(self, samples: np.ndarray) -> "KSpaceDataset":
        return KSpaceDataset(samples, self.traj, self.binning)


@dataclass(frozen=True, eq=False)
class CoilSensitivities:
    """Per-coil complex maps, ``maps[c, y, x]``."""

    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps)
        if maps.ndim != 3:
            raise ValueError(f"maps must be (ncoils, ny, nx), got {maps.shape}")
        if not np.all(np.isfinite(maps)):
            raise ValueError("coil maps contain NaN or Inf")
        object.__setattr__(self, "maps", _frozen(maps.astype(np.complex128, copy=False)))

    @property
    def ncoils(self) -> int:
        return self.maps.shape[0]

    @property
    def ny(self) -> int:
        return self.maps.shape[1]

    @property
    def nx(self) -> int:
        return self.maps.shape[2]

    def sum_of_squares(self) -> np.ndarray:
        return np.sum(np.abs(self.maps) ** 2, axis=0)

    def check_support(self, mask: np.ndarray | None = None) -> None:
        sos = self.sum_of_squares()
        inside = sos if mask is None else sos[np.asarray(mask, dtype=bool)]
        if np.any(inside <= 0):
            raise ValueError("coil sensitivities vanish inside the support mask")
