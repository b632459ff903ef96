"""Dense reference IRLS built on explicit lifted matrices.

Everything is formed from the lifted matrix itself, row chunk by row chunk:
the Gram matrix is ``sum_c T_c^T conj(T_c)`` and the regularizer applies
``v -> T^*( T(v) P )`` with ``P = sum_i h_i h_i^*``, the adjoint of the lifting
scattering entries back to the k-space samples they were copied from.  No FFT
identity is used, so this path is an independent check of the fast solver.
"""
from __future__ import annotations

import time

import numpy as np

from .forward import AcquisitionOperator
from .irls import Decomposition, IrlsConfig, RegularizerOp, SolveReport, run_irls
from .lifting import DENSE_CAP, FilterSupport, DenseCapError, lifted_rows, lifting_index
from .fastops import bank_from_eig, hermitian_eig
from .volume import ComplexVolume


class DeadlineExceeded(TimeoutError):
    """The dense solver ran past its time budget."""


class DirectBackend:
    """Explicit-lifting backend for :func:`expslr.irls.run_irls`.

    Parameters
    ----------
    shape : tuple
        Data shape ``(t, p, q)``.
    filt : FilterSupport
    mode : {"hybrid", "valid"}
        Lifting whose Gram matrix drives the weights.
    cap : int
        Maximum number of lifted-matrix entries (``rows * s``).
    chunk_rows : int, optional
        Rows processed per block; chosen to keep blocks near 2**22 entries.
    time_budget : float, optional
        Seconds after construction at which :class:`DeadlineExceeded` is raised.
    """

    def __init__(self, shape, filt: FilterSupport, mode: str = "hybrid", cap: int = DENSE_CAP,
                 chunk_rows: int | None = None, time_budget: float | None = None):
        if mode not in ("hybrid", "valid"):
            raise ValueError(f"direct backend supports 'hybrid' and 'valid' liftings, got {mode!r}")
        filt.check_fits(shape)
        self.shape = tuple(shape)
        self.filt = filt
        self.mode = mode
        self.n_rows = lifted_rows(shape, filt, mode)
        if self.n_rows * filt.size > cap:
            raise DenseCapError(f"lifted matrix {self.n_rows}x{filt.size} exceeds the dense cap of {cap} entries")
        self.chunk_rows = chunk_rows or max(1, (1 << 22) // filt.size)
        self.deadline = None if time_budget is None else time.perf_counter() + time_budget
        self._chunks = [slice(i, min(i + self.chunk_rows, self.n_rows))
                        for i in range(0, self.n_rows, self.chunk_rows)]
        self._index_cache: dict[int, np.ndarray] = {}
        self._n = int(np.prod(shape))

    def _check_time(self) -> None:
        if self.deadline is not None and time.perf_counter() > self.deadline:
            raise DeadlineExceeded("dense solver exceeded its time budget")

    def _index(self, k: int) -> np.ndarray:
        idx = self._index_cache.get(k)
        if idx is None:
            idx = self.index(self._chunks[k])
            if len(self._chunks) <= 16:
                self._index_cache[k] = idx
        return idx

    def index(self, rows: slice) -> np.ndarray:
        """Flat data indices of a block of lifted rows; override for other liftings."""
        return lifting_index(self.shape, self.filt, self.mode, rows)

    def gram(self, x) -> np.ndarray:
        flat = np.asarray(x, dtype=np.complex128).ravel()
        s = self.filt.size
        R = np.zeros((s, s), dtype=np.complex128)
        for k in range(len(self._chunks)):
            self._check_time()
            Tc = flat[self._index(k)]
            R += Tc.T @ Tc.conj()
        return R

    def decompose(self, x) -> Decomposition:
        R = self.gram(x)
        self._check_time()
        lam, U = hermitian_eig(R)
        return Decomposition(lam, (lam, U))

    def regularizer(self, dec, eps, p):
        lam, U = dec.parts
        P = np.conj(bank_from_eig(lam, U, eps, p).weight_matrix())

        pd = np.real(np.diag(P))
        diag = np.zeros(self._n)
        for k in range(len(self._chunks)):
            idx = self._index(k)
            diag += np.bincount(idx.ravel(), weights=np.broadcast_to(pd, idx.shape).ravel(), minlength=self._n)

        def apply(v):
            flat = np.asarray(v, dtype=np.complex128).ravel()
            out = np.zeros(self._n, dtype=np.complex128)
            for k in range(len(self._chunks)):
                self._check_time()
                idx = self._index(k)
                Y = flat[idx] @ P
                out += np.bincount(idx.ravel(), weights=Y.real.ravel(), minlength=self._n)
                out += 1j * np.bincount(idx.ravel(), weights=Y.imag.ravel(), minlength=self._n)
            return out.reshape(self.shape)

        return RegularizerOp(apply, diag.reshape(self.shape))


def direct_irls_reconstruct(b, A: AcquisitionOperator, filt: FilterSupport, config: IrlsConfig,
                            mode: str = "hybrid", cap: int = DENSE_CAP, time_budget: float | None = None
                            ) -> tuple[ComplexVolume, SolveReport]:
    """IRLS with explicit Gram matrices and an explicitly lifted normal operator."""
    backend = DirectBackend(A.shape, filt, mode, cap, time_budget=time_budget)
    x, report = run_irls(b, A, backend, config)
    return ComplexVolume(x), report
