"""Image-series storage, per-frame unitary DFTs and the CSER file format.

Volumes are held frame-major as arrays of shape ``(t, p, q)``: ``t`` frames of
``p`` rows by ``q`` columns.  The DFT origin sits at the ``(0, 0)`` corner of
every frame (no fftshift).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

CSER_MAGIC = b"CSER"
CSER_VERSION = 1
DTYPE_COMPLEX = 1
DTYPE_REAL = 2
HEADER_SIZE = 40
_HEADER = struct.Struct("<4sIII QQQ")
_ITEMSIZE = {DTYPE_COMPLEX: 16, DTYPE_REAL: 8}
_NUMPY_DTYPE = {DTYPE_COMPLEX: np.dtype("<c16"), DTYPE_REAL: np.dtype("<f8")}


class CserError(ValueError):
    """Base class for malformed CSER files."""


class BadMagicError(CserError):
    pass


class VersionMismatchError(CserError):
    pass


class UnknownDtypeError(CserError):
    pass


class TruncatedPayloadError(CserError):
    pass


class DimensionOverflowError(CserError):
    pass


@dataclass(frozen=True, eq=False)
class ComplexVolume:
    """A ``p x q x t`` series of frames.

    ``data`` has shape ``(t, p, q)`` and is made read-only on construction.
    Real (float64) data is allowed so that masks can share the type.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3-D (t, p, q), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"volume dimensions must be >= 1, got {arr.shape}")
        if np.iscomplexobj(arr):
            arr = arr.astype(np.complex128, copy=True)
        else:
            arr = arr.astype(np.float64, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, p: int, q: int, t: int) -> "ComplexVolume":
        return cls(np.zeros((t, p, q), dtype=np.complex128))

    @property
    def p(self) -> int:
        return self.data.shape[1]

    @property
    def q(self) -> int:
        return self.data.shape[2]

    @property
    def t(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def frame(self, n: int) -> np.ndarray:
        return self.data[n]

    def __array__(self, dtype=None, copy=None):
        arr = self.data if dtype is None else self.data.astype(dtype, copy=False)
        return arr.copy() if copy else arr

    def __len__(self) -> int:
        return self.t


def as_array(x) -> np.ndarray:
    """Return the ``(t, p, q)`` array behind a volume or array-like."""
    if isinstance(x, ComplexVolume):
        return x.data
    return np.asarray(x)


def fft2_frames(vol, direction: str = "forward"):
    """Unitary 2-D DFT of every frame.

    Returns a :class:`ComplexVolume` when given one, otherwise an ndarray.
    """
    arr = as_array(vol)
    if direction == "forward":
        out = np.fft.fft2(arr, axes=(-2, -1), norm="ortho")
    elif direction == "inverse":
        out = np.fft.ifft2(arr, axes=(-2, -1), norm="ortho")
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    if isinstance(vol, ComplexVolume):
        return ComplexVolume(out)
    return out


def as_casorati(vol) -> np.ndarray:
    """Casorati matrix ``B x T``: column ``n`` is the row-major vectorised frame ``n``."""
    arr = as_array(vol)
    t, p, q = arr.shape
    return arr.reshape(t, p * q).T


def write_cser(vol, path) -> None:
    """Write a volume (complex128 or float64) in CSER format."""
    arr = as_array(vol)
    if arr.ndim != 3:
        raise ValueError("CSER stores 3-D volumes only")
    t, p, q = arr.shape
    if np.iscomplexobj(arr):
        code = DTYPE_COMPLEX
    else:
        code = DTYPE_REAL
    payload = np.ascontiguousarray(arr, dtype=_NUMPY_DTYPE[code])
    header = _HEADER.pack(CSER_MAGIC, CSER_VERSION, code, 0, p, q, t)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="C"))


def read_cser(path) -> ComplexVolume:
    with open(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < 4 or header[:4] != CSER_MAGIC:
            raise BadMagicError(f"{os.fspath(path)}: bad magic {header[:4]!r}, expected b'CSER'")
        if len(header) < HEADER_SIZE:
            raise TruncatedPayloadError(f"{os.fspath(path)}: header truncated at {len(header)} bytes")
        _, version, code, _reserved, p, q, t = _HEADER.unpack(header)
        if version != CSER_VERSION:
            raise VersionMismatchError(f"{os.fspath(path)}: version {version}, reader supports {CSER_VERSION}")
        if code not in _ITEMSIZE:
            raise UnknownDtypeError(f"{os.fspath(path)}: unknown dtype code {code}")
        if min(p, q, t) < 1:
            raise DimensionOverflowError(f"{os.fspath(path)}: zero dimension ({p}, {q}, {t})")
        count = p * q * t
        nbytes = count * _ITEMSIZE[code]
        # Python ints never wrap; reject anything a u64 byte count cannot hold
        if nbytes >= 2**63:
            raise DimensionOverflowError(f"{os.fspath(path)}: dimensions ({p}, {q}, {t}) overflow the payload size")
        available = os.fstat(fh.fileno()).st_size - HEADER_SIZE
        if available < nbytes:
            raise TruncatedPayloadError(f"{os.fspath(path)}: payload has {available} bytes, expected {nbytes}")
        payload = fh.read(nbytes)
    data = np.frombuffer(payload, dtype=_NUMPY_DTYPE[code]).reshape(t, p, q)
    return ComplexVolume(data)
