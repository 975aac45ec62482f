"""Binary array files (``CSEQ`` complex / ``RSEQ`` real) and small text formats.

Record layout, all little-endian::

    magic     4 bytes   b"CSEQ" or b"RSEQ"
    version   u16       currently 1
    ndim      u16
    dims      u64 * ndim
    payload   float32 values, row-major, last dimension fastest;
              complex records interleave (re, im)

An image sequence is one 3-D complex record with dims ``(nt, ny, nx)``.  A
k-space dataset is three consecutive records: complex samples
``(ncoils, nspokes, nread)``, real trajectory ``(nspokes, nread, 2)`` and real
binning ``(nspokes,)``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .data import ImageSequence, KSpaceDataset

VERSION = 1
MAGIC_COMPLEX = b"CSEQ"
MAGIC_REAL = b"RSEQ"
MAX_ELEMENTS = 1 << 40


class ArrayFileError(ValueError):
    """Base class for malformed array files."""


class BadMagicError(ArrayFileError):
    pass


class DimensionOverflowError(ArrayFileError):
    pass


class TruncatedPayloadError(ArrayFileError):
    pass


def encode_record(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        magic = MAGIC_COMPLEX
        flat = np.empty(arr.size * 2, dtype="<f4")
        flat[0::2] = arr.real.ravel()
        flat[1::2] = arr.imag.ravel()
    else:
        magic = MAGIC_REAL
        flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
    header = magic + struct.pack("<HH", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + flat.tobytes()


def decode_record(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; return the array and the next offset."""
    if len(buf) - offset < 8:
        raise TruncatedPayloadError("file ends inside a record header")
    magic = buf[offset:offset + 4]
    if magic not in (MAGIC_COMPLEX, MAGIC_REAL):
        raise BadMagicError(f"unknown magic {magic!r}")
    version, ndim = struct.unpack_from("<HH", buf, offset + 4)
    if version != VERSION:
        raise BadMagicError(f"unsupported format version {version}")
    offset += 8
    if len(buf) - offset < 8 * ndim:
        raise TruncatedPayloadError("file ends inside the dimension list")
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimensionOverflowError(f"declared dims {dims} exceed {MAX_ELEMENTS} elements")
    per = 2 if magic == MAGIC_COMPLEX else 1
    nbytes = 4 * per * count
    if len(buf) - offset < nbytes:
        raise TruncatedPayloadError(
            f"payload needs {nbytes} bytes for dims {dims}, only {len(buf) - offset} present")
    flat = np.frombuffer(buf, dtype="<f4", count=per * count, offset=offset).astype(np.float64)
    if per == 2:
        arr = (flat[0::2] + 1j * flat[1::2]).reshape(dims)
    else:
        arr = flat.reshape(dims)
    return arr, offset + nbytes


def read_records(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    records, offset = [], 0
    while offset < len(buf):
        arr, offset = decode_record(buf, offset)
        records.append(arr)
    if not records:
        raise TruncatedPayloadError(f"{path} is empty")
    return records


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_array(obj, path) -> None:
    """Write an ImageSequence, KSpaceDataset or plain ndarray."""
    if isinstance(obj, ImageSequence):
        payload = encode_record(obj.data)
    elif isinstance(obj, KSpaceDataset):
        payload = (encode_record(obj.samples) + encode_record(obj.traj)
                   + encode_record(obj.binning.astype(np.float64)))
    else:
        payload = encode_record(np.asarray(obj))
    _atomic_write(path, payload)


def read_array(path):
    """Inverse of :func:`write_array`.

    Returns an :class:`ImageSequence` for a single 3-D complex record, a
    :class:`KSpaceDataset` for the three-record k-space layout and a plain
    ndarray otherwise.
    """
    records = read_records(path)
    if len(records) == 1:
        arr = records[0]
        if np.iscomplexobj(arr) and arr.ndim == 3:
            return ImageSequence(arr)
        return arr
    if len(records) == 3 and np.iscomplexobj(records[0]) and records[0].ndim == 3:
        return KSpaceDataset(records[0], records[1], records[2])
    raise ArrayFileError(f"{path}: unrecognised record layout ({len(records)} records)")


def write_manifest(fields: dict, path) -> None:
    lines = [f"{k} = {fields[k]}" for k in sorted(fields)]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
