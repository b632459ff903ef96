"""Dense multi-fold Toeplitz liftings and annihilation checks.

This is the small-scale reference path: every operator here materialises the
lifted matrix explicitly.  Rows index output shifts (temporal outer, then
row-major spatial), columns index filter taps ``(l, a, b)`` in the same order,
so ``T(rho_hat) @ d`` is the 3-D convolution ``rho_hat (*) d`` restricted to
the row set of the chosen mode:

``valid``
    linear convolution, only outputs whose support lies inside the data.
``hybrid``
    circular in both spatial axes, valid-linear along time; this is the
    operator the FFT solver works with.
``linear``
    the hybrid row set with samples outside the data treated as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import as_array

DENSE_CAP = 2 * 10**8
MODES = ("valid", "hybrid", "linear")


class DenseCapError(MemoryError):
    """Raised when an explicit matrix would exceed the dense-size cap."""


@dataclass(frozen=True)
class FilterSupport:
    n1: int
    n2: int
    m: int

    def __post_init__(self):
        if min(self.n1, self.n2, self.m) < 1:
            raise ValueError(f"filter dimensions must be >= 1, got {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.n1, self.n2, self.m)

    @property
    def size(self) -> int:
        return self.n1 * self.n2 * self.m

    @property
    def spatial_size(self) -> int:
        return self.n1 * self.n2

    def check_fits(self, shape) -> None:
        """Raise unless the filter fits a ``(t, p, q)`` array."""
        t, p, q = shape
        if self.n1 > p or self.n2 > q or self.m > t:
            raise ValueError(f"filter {self.n1}x{self.n2}x{self.m} does not fit data {p}x{q}x{t}")

    def is_full_spatial(self, shape) -> bool:
        _, p, q = shape
        return self.n1 == p and self.n2 == q


@dataclass(frozen=True, eq=False)
class LiftedMatrix:
    matrix: np.ndarray
    mode: str
    filt: FilterSupport

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    def __array__(self, dtype=None, copy=None):
        arr = self.matrix if dtype is None else self.matrix.astype(dtype, copy=False)
        return arr.copy() if copy else arr

    def __matmul__(self, other):
        return self.matrix @ other


def valid_shift_count(outer, inner) -> int:
    """Number of placements of box ``inner`` inside box ``outer``."""
    outer, inner = tuple(outer), tuple(inner)
    if len(outer) != len(inner):
        raise ValueError("dimension mismatch")
    if any(i > o for o, i in zip(outer, inner)):
        raise ValueError(f"inner box {inner} exceeds outer box {outer}")
    return int(np.prod([o - i + 1 for o, i in zip(outer, inner)]))


def lifted_rows(shape, filt: FilterSupport, mode: str) -> int:
    t, p, q = shape
    k = t - filt.m + 1
    if mode == "valid":
        return (p - filt.n1 + 1) * (q - filt.n2 + 1) * k
    if mode in ("hybrid", "linear"):
        return p * q * k
    raise ValueError(f"unknown lifting mode {mode!r}; expected one of {MODES}")


def lifting_index(shape, filt: FilterSupport, mode: str, rows: slice | None = None) -> np.ndarray:
    """Flat indices into the ``(t, p, q)`` data for each lifted-matrix entry.

    Entries that fall outside the data (``linear`` mode only) are ``-1``.
    ``rows`` selects a contiguous block of rows, for chunked processing.
    """
    t, p, q = shape
    filt.check_fits(shape)
    n1, n2, m = filt.dims
    if mode == "valid":
        ks1, ks2 = np.arange(n1 - 1, p), np.arange(n2 - 1, q)
    elif mode in ("hybrid", "linear"):
        ks1, ks2 = np.arange(p), np.arange(q)
    else:
        raise ValueError(f"unknown lifting mode {mode!r}; expected one of {MODES}")
    ns = np.arange(m - 1, t)
    n_rows = len(ns) * len(ks1) * len(ks2)
    r = np.arange(n_rows)[rows if rows is not None else slice(None)]
    rn, rem = np.divmod(r, len(ks1) * len(ks2))
    r1, r2 = np.divmod(rem, len(ks2))
    row_n, row_1, row_2 = ns[rn], ks1[r1], ks2[r2]

    taps = np.arange(filt.size)
    cl, crem = np.divmod(taps, n1 * n2)
    ca, cb = np.divmod(crem, n2)

    src_n = row_n[:, None] - cl[None, :]
    src_1 = row_1[:, None] - ca[None, :]
    src_2 = row_2[:, None] - cb[None, :]
    if mode == "hybrid":
        src_1 %= p
        src_2 %= q
        return (src_n * p + src_1) * q + src_2
    idx = (src_n * p + src_1) * q + src_2
    if mode == "linear":
        idx[(src_1 < 0) | (src_2 < 0)] = -1
    return idx


def _check_cap(n_entries: int, cap: int) -> None:
    if n_entries > cap:
        raise DenseCapError(f"dense matrix with {n_entries} entries exceeds the cap of {cap}")


def build_lifted(rho_hat, filt: FilterSupport, mode: str = "valid", cap: int = DENSE_CAP) -> LiftedMatrix:
    """Explicit lifted matrix ``T(rho_hat)`` of shape ``rows x s``."""
    x = as_array(rho_hat)
    filt.check_fits(x.shape)
    _check_cap(lifted_rows(x.shape, filt, mode) * filt.size, cap)
    idx = lifting_index(x.shape, filt, mode)
    flat = np.asarray(x, dtype=np.complex128).ravel()
    if mode == "linear":
        mat = np.where(idx >= 0, flat[np.maximum(idx, 0)], 0)
    else:
        mat = flat[idx]
    return LiftedMatrix(mat, mode, filt)


def annihilating_filter_from_betas(betas, filt: FilterSupport) -> np.ndarray:
    """Filter vector (length ``s``) with temporal taps of ``prod_i (1 - beta_i z)``.

    The spatial part is a delta at tap ``(0, 0)``, which annihilates series whose
    exponential bases do not vary in space.
    """
    betas = np.atleast_1d(np.asarray(betas, dtype=np.complex128))
    if filt.m < len(betas) + 1:
        raise ValueError(f"temporal filter length {filt.m} < L+1 = {len(betas) + 1}")
    coeffs = np.array([1.0 + 0j])
    for beta in betas:
        coeffs = np.convolve(coeffs, [1.0, -beta])
    d = np.zeros(filt.size, dtype=np.complex128)
    d[np.arange(len(coeffs)) * filt.spatial_size] = coeffs
    return d


def annihilation_residual(rho_hat, d, filt: FilterSupport) -> float:
    """``||T d|| / (||T||_F ||d||)`` for the valid-mode lifting; 0 for zero data."""
    T = build_lifted(rho_hat, filt, "valid").matrix
    d = np.asarray(d)
    denom = np.linalg.norm(T) * np.linalg.norm(d)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(T @ d) / denom)


def numerical_rank(matrix, rel_tol: float = 1e-8, cap: int = DENSE_CAP) -> int:
    """Count of singular values above ``rel_tol * sigma_max``."""
    mat = np.asarray(matrix)
    _check_cap(mat.size, cap)
    if mat.size == 0:
        return 0
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


def direct_irls_reconstruct(b, A, filt: FilterSupport, config, mode: str = "hybrid", cap: int = DENSE_CAP,
                            time_budget: float | None = None):
    """Reference IRLS on explicit lifted matrices; see :mod:`expslr.direct`."""
    from .direct import direct_irls_reconstruct as _run

    return _run(b, A, filt, config, mode=mode, cap=cap, time_budget=time_budget)
