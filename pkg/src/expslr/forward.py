"""Multi-coil undersampled Fourier acquisition operator and its adjoint."""
from __future__ import annotations

import numpy as np

from .volume import as_array


class AcquisitionOperator:
    """Maps k-space series ``(t, p, q)`` to masked per-coil k-space ``(J, t, p, q)``.

    Per frame ``i`` and coil ``j`` the measurement is ``S_i F C_j F* x_i``.
    Unsampled entries of the output are exactly zero.

    Parameters
    ----------
    mask : array_like of bool, shape (t, p, q)
        Sampling pattern, one frame per echo.
    coils : array_like of complex, shape (J, p, q), optional
        Coil sensitivity maps.  ``None`` means a single unit coil.
    """

    def __init__(self, mask, coils=None):
        mask = np.asarray(as_array(mask)).astype(bool)
        if mask.ndim != 3:
            raise ValueError(f"mask must have shape (t, p, q), got {mask.shape}")
        t, p, q = mask.shape
        if coils is None:
            coils = np.ones((1, p, q), dtype=np.complex128)
        coils = np.asarray(as_array(coils), dtype=np.complex128)
        if coils.ndim == 2:
            coils = coils[None]
        if coils.shape[1:] != (p, q):
            raise ValueError(f"coil maps {coils.shape[1:]} do not match mask frames {(p, q)}")
        self.mask = mask
        self.coils = coils

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mask.shape

    @property
    def n_coils(self) -> int:
        return self.coils.shape[0]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = as_array(x)
        if x.shape != self.shape:
            raise ValueError(f"input shape {x.shape} does not match operator shape {self.shape}")
        return x

    def apply(self, rho_hat) -> np.ndarray:
        x = self._check(rho_hat)
        img = np.fft.ifft2(x, axes=(-2, -1), norm="ortho")
        out = np.fft.fft2(self.coils[:, None] * img[None], axes=(-2, -1), norm="ortho")
        out *= self.mask[None]
        return out

    def apply_adjoint(self, b) -> np.ndarray:
        b = np.asarray(b)
        if b.shape != (self.n_coils,) + self.shape:
            raise ValueError(f"measurement shape {b.shape} does not match {(self.n_coils,) + self.shape}")
        img = np.fft.ifft2(b * self.mask[None], axes=(-2, -1), norm="ortho")
        # fixed coil order keeps the sum bitwise reproducible
        acc = np.zeros(self.shape, dtype=np.complex128)
        for j in range(self.n_coils):
            acc += np.conj(self.coils[j]) * img[j]
        return np.fft.fft2(acc, axes=(-2, -1), norm="ortho")

    def normal(self, rho_hat) -> np.ndarray:
        """``A* A x`` without materialising the coil axis twice."""
        return self.apply_adjoint(self.apply(rho_hat))

    def normal_diagonal(self) -> np.ndarray:
        """Exact diagonal of ``A* A`` in k-space, shape ``(t, p, q)``.

        Entry ``(n, k')`` is ``sum_j sum_k S_n(k) |c_j(k - k')|^2 / (p q)^2`` with
        ``c_j`` the unnormalised DFT of coil ``j``; a circular correlation of the
        mask with the coil power spectra, evaluated by FFT.
        """
        t, p, q = self.shape
        power = np.sum(np.abs(np.fft.fft2(self.coils, axes=(-2, -1))) ** 2, axis=0) / (p * q) ** 2
        mk = np.fft.fft2(self.mask.astype(float), axes=(-2, -1))
        pw = np.fft.fft2(power)
        # sum_k S(k) P(k - k') = (S corr P)(k'), i.e. ifft(fft(S) * conj(fft(P))) for real P
        diag = np.fft.ifft2(mk * np.conj(pw)[None], axes=(-2, -1)).real
        return np.maximum(diag, 0.0)

    __call__ = apply


def operator_norm(op: AcquisitionOperator, iters: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of ``||A||``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = op.normal(x)
        lam = np.linalg.norm(y)
        if lam == 0:
            return 0.0
        x = y / lam
    return float(np.sqrt(lam))
