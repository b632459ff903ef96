"""FFT-based Gram matrix, filter bank and fused regularizer kernel.

These operators work with the hybrid lifting: spatially circular, temporally
valid-linear.  Gram blocks come from FFTs of products of image frames, and the
sum over all annihilating filters of ``||T(x) h||^2`` is folded into one
banded ``t x t`` matrix per pixel, so a regularizer application costs
``O(p q t m)`` regardless of the number of filters.

Conventions
-----------
The Gram matrix is ``R = T^T conj(T)`` (filters multiply the lifting from the
left), its eigenpairs are ``(lambda_i, u_i)`` and the filters are
``h_i = sqrt(alpha_i) conj(u_i)`` with ``alpha_i = (lambda_i + eps)**(p/2 - 1)``.
The per-pixel weight of tap ``l`` of filter ``h`` is
``mu_l(r) = sum_a h[l, a] exp(+2 pi i a.r / N)``, the factor that turns
circular convolution in k-space into multiplication in the image domain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .lifting import DENSE_CAP, FilterSupport, build_lifted
from .volume import as_array

EPS_REL_FLOOR = 1e-15


@dataclass(frozen=True, eq=False)
class GramMatrix:
    matrix: np.ndarray
    filt: FilterSupport

    def block(self, a: int, b: int) -> np.ndarray:
        ns = self.filt.spatial_size
        return self.matrix[a * ns:(a + 1) * ns, b * ns:(b + 1) * ns]

    def __array__(self, dtype=None, copy=None):
        arr = self.matrix if dtype is None else self.matrix.astype(dtype, copy=False)
        return arr.copy() if copy else arr


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Eigen-decomposition of ``R`` and the derived filter weights."""

    eigvals: np.ndarray
    eigvecs: np.ndarray
    alphas: np.ndarray
    eps: float
    p: float

    @property
    def filters(self) -> np.ndarray:
        """Rows are ``h_i = sqrt(alpha_i) conj(u_i)``."""
        return (np.sqrt(self.alphas)[:, None] * np.conj(self.eigvecs.T))

    def weight_matrix(self) -> np.ndarray:
        """``sum_i conj(h_i) h_i^T = U diag(alpha) U^*``, i.e. ``(R + eps I)^(p/2-1)``."""
        return (self.eigvecs * self.alphas) @ self.eigvecs.conj().T

    def sqrt_weight(self) -> np.ndarray:
        """``H^(1/2) = diag((lambda + eps)^(p/4 - 1/2)) U^*``; its rows are the filters."""
        return self.filters


@dataclass(frozen=True, eq=False)
class SpatialWeightStack:
    weights: np.ndarray  # (n_filters, m, p, q)


@dataclass(frozen=True, eq=False)
class RegularizerKernel:
    """Per-pixel Hermitian banded matrices, stored dense as ``(p, q, t, t)``."""

    matrices: np.ndarray
    m: int

    @property
    def t(self) -> int:
        return self.matrices.shape[-1]


def weight_exponent(p: float) -> float:
    """Exponent of ``lambda + eps`` in the filter weights; ``p = 0`` is log-det."""
    return -1.0 if p == 0 else p / 2.0 - 1.0


def _images(rho_hat) -> np.ndarray:
    return np.fft.ifft2(np.asarray(as_array(rho_hat), dtype=np.complex128), axes=(-2, -1), norm="ortho")


def _frame_products(img: np.ndarray, m: int, l1: int, l2: int) -> np.ndarray:
    """``sum_{n=m-1}^{t-1} img[n-l1] * conj(img[n-l2])``."""
    t = img.shape[0]
    a = img[m - 1 - l1:t - l1]
    b = img[m - 1 - l2:t - l2]
    return np.einsum("npq,npq->pq", a, np.conj(b))


def _difference_index(filt: FilterSupport, p: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Wrapped spatial offsets ``a2 - a1`` for every pair of spatial taps."""
    a1, a2 = np.divmod(np.arange(filt.spatial_size), filt.n2)
    d1 = (a1[None, :] - a1[:, None]) % p
    d2 = (a2[None, :] - a2[:, None]) % q
    return d1, d2


def gram_matrix(rho_hat, filt: FilterSupport) -> GramMatrix:
    """Gram matrix of the hybrid lifting built block-wise from 2-D FFTs.

    Block ``(l1, l2)`` holds ``fft2(sum_n rho_{n-l1} conj(rho_{n-l2}))`` sampled
    at the wrapped offsets ``a2 - a1`` of the two spatial taps.
    """
    x = as_array(rho_hat)
    filt.check_fits(x.shape)
    t, p, q = x.shape
    img = _images(x)
    m, ns = filt.m, filt.spatial_size
    d1, d2 = _difference_index(filt, p, q)
    R = np.empty((filt.size, filt.size), dtype=np.complex128)
    for l1 in range(m):
        for l2 in range(l1, m):
            g = np.fft.fft2(_frame_products(img, m, l1, l2))
            blk = g[d1, d2]
            R[l1 * ns:(l1 + 1) * ns, l2 * ns:(l2 + 1) * ns] = blk
            if l2 != l1:
                R[l2 * ns:(l2 + 1) * ns, l1 * ns:(l1 + 1) * ns] = blk.conj().T
    return GramMatrix(R, filt)


def hermitian_eig(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(R)):
        raise np.linalg.LinAlgError("Gram matrix has non-finite entries")
    R = 0.5 * (R + R.conj().T)
    return scipy.linalg.eigh(R, driver="evr", check_finite=False)


def _floored_eps(eps: float, lam_max: float) -> float:
    floor = EPS_REL_FLOOR * lam_max if lam_max > 0 else EPS_REL_FLOOR
    return max(float(eps), floor)


def filter_bank(R, eps: float, p: float) -> FilterBank:
    """All ``s`` filters ``h_i = sqrt(alpha_i) conj(u_i)`` from the eigen-decomposition of ``R``."""
    if not 0 <= p <= 1:
        raise ValueError(f"Schatten exponent must lie in [0, 1], got {p}")
    R = np.asarray(R.matrix if isinstance(R, GramMatrix) else R)
    lam, U = hermitian_eig(R)
    return bank_from_eig(lam, U, eps, p)


def bank_from_eig(lam: np.ndarray, U: np.ndarray, eps: float, p: float) -> FilterBank:
    lam = np.maximum(lam, 0.0)
    eps = _floored_eps(eps, float(lam.max(initial=0.0)))
    alphas = (lam + eps) ** weight_exponent(p)
    return FilterBank(lam, U, alphas, eps, p)


def spatial_weights(bank: FilterBank, filt: FilterSupport, p_dim: int, q_dim: int) -> SpatialWeightStack:
    """``mu_l^(i)``: zero-padded spatial slices of each filter, transformed to the image grid."""
    h = bank.filters.reshape(-1, filt.m, filt.n1, filt.n2)
    padded = np.zeros(h.shape[:2] + (p_dim, q_dim), dtype=np.complex128)
    padded[..., :filt.n1, :filt.n2] = h
    return SpatialWeightStack(np.fft.ifft2(padded, axes=(-2, -1)) * (p_dim * q_dim))


def _kernel_from_tap_weights(W: np.ndarray, t: int) -> RegularizerKernel:
    """Sum shifted copies of the per-pixel tap matrices ``W (p, q, m, m)`` into ``t x t``."""
    p, q, m, _ = W.shape
    if t < m:
        raise ValueError(f"t={t} is smaller than the temporal filter length {m}")
    G = np.zeros((p, q, t, t), dtype=np.complex128)
    Wf = W[:, :, ::-1, ::-1]
    for j in range(t - m + 1):
        G[:, :, j:j + m, j:j + m] += Wf
    return RegularizerKernel(G, m)


def regularizer_kernel(weights: SpatialWeightStack, t: int) -> RegularizerKernel:
    """Per-pixel ``G(r)`` with ``x^* Q G Q^* x = sum_i ||T(x) h_i||^2``."""
    mu = weights.weights
    W = np.einsum("ilpq,ikpq->pqlk", np.conj(mu), mu)
    return _kernel_from_tap_weights(W, t)


def kernel_from_weight_matrix(Hw: np.ndarray, filt: FilterSupport, shape) -> RegularizerKernel:
    """Fused kernel straight from ``sum_i conj(h_i) h_i^T`` without forming the filters.

    ``W(r)[l1, l2] = sum_{a1, a2} Hw[(l1, a1), (l2, a2)] exp(2 pi i (a2 - a1).r / N)``;
    entries are binned by their wrapped offset and one inverse FFT per tap pair
    evaluates the sum at every pixel.
    """
    t, p, q = shape
    m, ns = filt.m, filt.spatial_size
    d1, d2 = _difference_index(filt, p, q)
    offset = (d1 * q + d2).ravel()
    H4 = np.asarray(Hw).reshape(m, ns, m, ns).transpose(0, 2, 1, 3).reshape(m * m, ns * ns)
    bins = (np.arange(m * m)[:, None] * (p * q) + offset[None, :]).ravel()
    vals = H4.ravel()
    w = (np.bincount(bins, weights=vals.real, minlength=m * m * p * q)
         + 1j * np.bincount(bins, weights=vals.imag, minlength=m * m * p * q))
    w = w.reshape(m, m, p, q)
    W = np.fft.ifft2(w, axes=(-2, -1)) * (p * q)
    return _kernel_from_tap_weights(W.transpose(2, 3, 0, 1), t)


def apply_regularizer(rho_hat, kernel: RegularizerKernel) -> np.ndarray:
    """``Q G Q^* x``: per-frame inverse DFT, per-pixel ``G(r)`` product, forward DFT."""
    x = as_array(rho_hat)
    if x.shape != (kernel.t,) + kernel.matrices.shape[:2]:
        raise ValueError(f"data shape {x.shape} does not match kernel {(kernel.t,) + kernel.matrices.shape[:2]}")
    img = np.fft.ifft2(x, axes=(-2, -1), norm="ortho")
    out = np.einsum("pqcd,dpq->cpq", kernel.matrices, img)
    return np.fft.fft2(out, axes=(-2, -1), norm="ortho")


def regularizer_value(rho_hat, kernel: RegularizerKernel) -> float:
    x = as_array(rho_hat)
    return float(np.vdot(x, apply_regularizer(x, kernel)).real)


# Full-spatial filters (n1 = p, n2 = q): the hybrid lifting is unitarily
# block-diagonal over pixels, each block being the temporal Toeplitz matrix of
# that pixel scaled by sqrt(p q).  The s x s eigenproblem splits into p q
# problems of size m x m.

def pixel_grams(rho_hat, filt: FilterSupport) -> np.ndarray:
    """Per-pixel ``p q * sum_n rho_{n-l1}(r) conj(rho_{n-l2}(r))`` as ``(p, q, m, m)``."""
    x = as_array(rho_hat)
    t, p, q = x.shape
    img = _images(x)
    m = filt.m
    S = np.empty((p, q, m, m), dtype=np.complex128)
    for l1 in range(m):
        for l2 in range(l1, m):
            S[:, :, l1, l2] = _frame_products(img, m, l1, l2)
            S[:, :, l2, l1] = np.conj(S[:, :, l1, l2])
    return S * (p * q)


def pixel_eig(rho_hat, filt: FilterSupport) -> tuple[np.ndarray, np.ndarray]:
    S = pixel_grams(rho_hat, filt)
    if not np.all(np.isfinite(S)):
        raise np.linalg.LinAlgError("pixel Gram matrices have non-finite entries")
    return np.linalg.eigh(S)


def kernel_from_pixel_eig(lam: np.ndarray, V: np.ndarray, eps: float, p: float, t: int) -> RegularizerKernel:
    """Fused kernel for full-spatial filters: ``W(r) = p q f(S(r))``."""
    P, Qd = lam.shape[:2]
    lam = np.maximum(lam, 0.0)
    eps = _floored_eps(eps, float(lam.max(initial=0.0)))
    alphas = (lam + eps) ** weight_exponent(p)
    F = np.einsum("pqak,pqk,pqbk->pqab", V, alphas, np.conj(V))
    return _kernel_from_tap_weights(F * (P * Qd), t)


def hybrid_vs_valid_gap(rho_hat, filt: FilterSupport, centered: bool = True, cap: int = DENSE_CAP) -> float:
    """Relative size of the spatial wrap-around in the hybrid lifting.

    Compares the hybrid lifting with the zero-padded linear lifting on the same
    rows; they differ only in entries that wrap around the k-space edge.  The
    difference is normalised by the valid-mode lifting.  With ``centered`` the
    data are fftshifted first so the array edges are the highest spatial
    frequencies.
    """
    x = as_array(rho_hat)
    if centered:
        x = np.fft.fftshift(x, axes=(-2, -1))
    hyb = build_lifted(x, filt, "hybrid", cap).matrix
    lin = build_lifted(x, filt, "linear", cap).matrix
    val = build_lifted(x, filt, "valid", cap).matrix
    num = np.linalg.norm(hyb - lin)
    if num == 0:
        return 0.0
    den = np.linalg.norm(val)
    return float(num / den) if den > 0 else float("inf")
