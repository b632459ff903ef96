"""IRLS reconstruction: alternating filter-bank updates and CG least squares.

Each outer iteration majorises the smoothed Schatten penalty of the lifted
matrix by a quadratic built from the current filter bank, then decreases

    (1/2) x* Q G Q* x + (mu/2) ||A x - b||^2

with a few warm-started conjugate-gradient steps on

    (Q G Q* + mu A*A) x = mu A* b.

The cost tracked per iteration is

    J(x) = (1/p) sum_i (lambda_i + eps)^(p/2) + (mu/2) ||A x - b||^2

(``(1/2) sum_i log(lambda_i + eps)`` replaces the first term when ``p = 0``),
and the quadratic above majorises ``J`` at the current iterate up to a constant,
so with a frozen ``eps`` the cost never increases.

The engine is independent of how the Gram eigen-decomposition and the
regularizer operator are produced; :class:`FastBackend` uses FFTs, the dense
reference lives in :mod:`expslr.direct`.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from . import fastops
from .forward import AcquisitionOperator
from .lifting import FilterSupport
from .volume import ComplexVolume, as_array


class NonFiniteError(FloatingPointError):
    """A cost, residual or iterate became NaN or infinite."""


class NotPsdError(ValueError):
    """The normal operator failed the positive-semidefinite spot check."""


@dataclass(frozen=True)
class IrlsConfig:
    """Solver settings.

    Parameters
    ----------
    mu : float
        Data-consistency weight.
    p : float
        Schatten exponent in ``[0, 1]``; ``0`` selects the log-det penalty.
    gamma : float
        ``eps`` is divided by ``gamma`` after every outer iteration.  ``1``
        freezes ``eps``.
    eps0_scale : float
        Initial ``eps`` as a fraction of the largest Gram eigenvalue of ``A* b``.
    eps_floor : float
        Lower bound on ``eps``, also relative to that eigenvalue.
    max_iters, cg_max : int
        Outer and inner iteration limits.
    cg_tol, outer_tol : float
        Relative CG residual and relative cost-change tolerances.
    precondition : bool
        Run CG with the exact diagonal of the normal operator as a Jacobi
        preconditioner.
    keep_iterates : bool
        Store a copy of every outer iterate in the report.
    """

    mu: float
    p: float
    gamma: float = 1.4
    eps0_scale: float = 0.01
    max_iters: int = 30
    cg_max: int = 20
    cg_tol: float = 1e-6
    outer_tol: float = 1e-5
    eps_floor: float = 1e-9
    precondition: bool = True
    keep_iterates: bool = False

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if not 0 <= self.p <= 1:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if not self.gamma >= 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        for name in ("eps0_scale", "cg_tol", "outer_tol", "eps_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.max_iters < 1 or self.cg_max < 1:
            raise ValueError("max_iters and cg_max must be >= 1")

    def with_mu(self, mu: float) -> "IrlsConfig":
        return replace(self, mu=mu)


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    penalty: float
    data_term: float
    residual_norm: float
    eps: float
    lam_max: float
    lam_min: float
    n_above_eps: int
    cg_iters: int
    cg_residual: float
    seconds: float
    snr_db: float = float("nan")


REPORT_COLUMNS = ("iteration", "cost", "penalty", "data_term", "residual_norm", "eps", "lam_max",
                  "lam_min", "n_above_eps", "cg_iters", "cg_residual", "seconds", "snr_db")


@dataclass
class SolveReport:
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    warnings: list[str] = field(default_factory=list)
    iterates: list[np.ndarray] = field(default_factory=list)
    initial_cost: float = float("nan")
    mu: float = float("nan")
    p: float = float("nan")

    @property
    def n_iters(self) -> int:
        return len(self.records)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records])

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    def rows(self) -> list[list]:
        return [[getattr(r, c) for c in REPORT_COLUMNS] for r in self.records]

    def to_csv(self, path) -> None:
        from .analysis import export_csv

        export_csv(self.rows(), path, header=REPORT_COLUMNS)


# ---------------------------------------------------------------- CG

@dataclass
class CgResult:
    x: np.ndarray
    residuals: list[float]
    iterations: int
    stagnated: bool = False

    @property
    def final_residual(self) -> float:
        return self.residuals[-1]


def _dot(a: np.ndarray, b: np.ndarray) -> complex:
    return np.vdot(a.ravel(), b.ravel())


def cg_solve(normal_op: Callable[[np.ndarray], np.ndarray], rhs, x0=None, cg_tol: float = 1e-6,
             cg_max: int = 20, psd_slack: float = 1e-8, stall_window: int = 5,
             precond: np.ndarray | None = None) -> CgResult:
    """Conjugate gradients for a Hermitian positive-semidefinite operator.

    Parameters
    ----------
    normal_op : callable
        ``x -> N x`` on arrays shaped like ``rhs``.
    rhs : ndarray
    x0 : ndarray, optional
        Warm start; zeros when omitted.
    cg_tol : float
        Stop once ``||rhs - N x|| <= cg_tol * ||rhs||``.
    cg_max : int
        Iteration limit.
    precond : ndarray, optional
        Positive diagonal ``D`` of a Jacobi preconditioner (iterations run on
        ``D^-1 N``); the residual tolerance still refers to ``rhs - N x``.

    Returns
    -------
    CgResult
        ``residuals[k]`` is the relative residual after ``k`` iterations.
        ``stagnated`` flags that ``stall_window`` consecutive iterations
        brought no new minimum residual.
    """
    b = np.asarray(rhs, dtype=np.complex128)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.complex128, copy=True)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return CgResult(np.zeros_like(b), [0.0], 0)
    r = b - normal_op(x) if x0 is not None else b.copy()
    inv = None if precond is None else 1.0 / np.asarray(precond)
    z = r if inv is None else inv * r
    d = z.copy()
    rz = _dot(r, z).real
    hist = [np.linalg.norm(r) / bnorm]
    if not np.isfinite(hist[0]):
        raise NonFiniteError("non-finite initial CG residual")
    best, since_best, stagnated = hist[0], 0, False
    k = 0
    while k < cg_max and hist[-1] > cg_tol:
        Nd = normal_op(d)
        dNd = _dot(d, Nd).real
        dd = _dot(d, d).real
        if dNd < -psd_slack * dd:
            raise NotPsdError(f"<d, N d> = {dNd:.3e} < 0: normal operator is not PSD")
        if dNd <= 0:
            break
        alpha = rz / dNd
        x += alpha * d
        r -= alpha * Nd
        z = r if inv is None else inv * r
        rz_new = _dot(r, z).real
        k += 1
        hist.append(np.linalg.norm(r) / bnorm)
        if not (np.isfinite(hist[-1]) and np.all(np.isfinite(x))):
            raise NonFiniteError(f"non-finite values in CG iteration {k}")
        if hist[-1] < best:
            best, since_best = hist[-1], 0
        else:
            since_best += 1
            if since_best >= stall_window:
                stagnated = True
        d = z + (rz_new / rz) * d
        rz = rz_new
    return CgResult(x, hist, k, stagnated)


# ---------------------------------------------------------------- costs

def penalty_value(lam: np.ndarray, eps: float, p: float) -> float:
    """``(1/p) sum (lam + eps)^(p/2)``, or ``(1/2) sum log(lam + eps)`` for ``p = 0``."""
    lam = np.maximum(np.asarray(lam, dtype=float), 0.0) + eps
    if p == 0:
        return float(0.5 * np.sum(np.log(lam)))
    return float(np.sum(lam ** (p / 2)) / p)


def data_term(x, b, A: AcquisitionOperator, mu: float) -> tuple[float, float]:
    res = np.linalg.norm(A.apply(x) - b)
    return 0.5 * mu * res**2, float(res)


# ---------------------------------------------------------------- backends

@dataclass
class Decomposition:
    """Eigen-decomposition of the lifted Gram matrix at one iterate.

    ``eigvals`` always holds the full spectrum; ``parts`` is backend-private.
    """

    eigvals: np.ndarray
    parts: tuple

    @property
    def lam_max(self) -> float:
        return float(max(self.eigvals.max(initial=0.0), 0.0))


@dataclass
class RegularizerOp:
    """``x -> Q G Q* x`` together with its exact diagonal (shape ``(t, p, q)``)."""

    apply: Callable[[np.ndarray], np.ndarray]
    diagonal: np.ndarray

    def __call__(self, x):
        return self.apply(x)


class Backend(Protocol):
    def decompose(self, x: np.ndarray) -> Decomposition: ...

    def regularizer(self, dec: Decomposition, eps: float, p: float) -> RegularizerOp: ...


class FastBackend:
    """FFT Gram matrix, dense eigensolver, fused per-pixel kernel.

    Filters spanning the whole frame (``n1 = p``, ``n2 = q``) take a per-pixel
    path whose eigenproblems are only ``m x m``.
    """

    def __init__(self, shape, filt: FilterSupport):
        filt.check_fits(shape)
        self.shape = tuple(shape)
        self.filt = filt
        self.pixelwise = filt.is_full_spatial(shape)

    def decompose(self, x) -> Decomposition:
        if self.pixelwise:
            lam, V = fastops.pixel_eig(x, self.filt)
            return Decomposition(np.sort(lam.ravel()), (lam, V))
        R = fastops.gram_matrix(x, self.filt).matrix
        lam, U = fastops.hermitian_eig(R)
        return Decomposition(lam, (lam, U))

    def kernel(self, dec: Decomposition, eps: float, p: float) -> fastops.RegularizerKernel:
        lam, vecs = dec.parts
        if self.pixelwise:
            return fastops.kernel_from_pixel_eig(lam, vecs, eps, p, self.shape[0])
        bank = fastops.bank_from_eig(lam, vecs, eps, p)
        return fastops.kernel_from_weight_matrix(bank.weight_matrix(), self.filt, self.shape)

    def regularizer(self, dec, eps, p) -> RegularizerOp:
        K = self.kernel(dec, eps, p)
        t, pd, qd = self.shape
        # diagonal of Q G Q*: per frame, the pixel average of G(r)[c, c]
        dg = np.einsum("pqcc->c", K.matrices).real / (pd * qd)
        diag = np.broadcast_to(dg[:, None, None], self.shape)
        return RegularizerOp(lambda v: fastops.apply_regularizer(v, K), diag)


# ---------------------------------------------------------------- engine

def run_irls(b, A: AcquisitionOperator, backend: Backend, cfg: IrlsConfig,
             callback: Callable[[int, np.ndarray, IterationRecord], None] | None = None
             ) -> tuple[np.ndarray, SolveReport]:
    """Outer IRLS loop shared by all backends."""
    b = np.asarray(b, dtype=np.complex128)
    if not np.all(np.isfinite(b)):
        raise NonFiniteError("measurements contain NaN or infinite values")
    t0 = time.perf_counter()
    x = A.apply_adjoint(b)
    rhs = cfg.mu * x
    dec = backend.decompose(x)
    lam0 = dec.lam_max
    if lam0 > 0:
        eps, floor = cfg.eps0_scale * lam0, cfg.eps_floor * lam0
    else:
        eps, floor = 1.0, cfg.eps_floor
    report = SolveReport(mu=cfg.mu, p=cfg.p)
    dterm, _ = data_term(x, b, A, cfg.mu)
    prev = penalty_value(dec.eigvals, eps, cfg.p) + dterm
    report.initial_cost = prev
    if not np.isfinite(prev):
        raise NonFiniteError("initial cost is not finite")
    normal = lambda v: reg(v) + cfg.mu * A.normal(v)  # noqa: E731
    data_diag = cfg.mu * A.normal_diagonal() if cfg.precondition else None
    for it in range(1, cfg.max_iters + 1):
        reg = backend.regularizer(dec, eps, cfg.p)
        precond = None
        if data_diag is not None:
            precond = reg.diagonal + data_diag
            precond = np.where(precond > 0, precond, 1.0)
        cg = cg_solve(normal, rhs, x, cfg.cg_tol, cfg.cg_max, precond=precond)
        if cg.stagnated:
            report.warnings.append(f"iteration {it}: CG residual stagnated at {cg.final_residual:.3e}")
        x = cg.x
        dec = backend.decompose(x)
        pen = penalty_value(dec.eigvals, eps, cfg.p)
        dterm, resn = data_term(x, b, A, cfg.mu)
        cost = pen + dterm
        if not np.isfinite(cost):
            raise NonFiniteError(f"cost became non-finite at iteration {it}")
        lam = dec.eigvals
        rec = IterationRecord(it, cost, pen, dterm, resn, eps, float(lam.max()), float(lam.min()),
                              int(np.sum(lam > eps)), cg.iterations, cg.final_residual,
                              time.perf_counter() - t0)
        report.records.append(rec)
        if cfg.keep_iterates:
            report.iterates.append(x.copy())
        if callback is not None:
            callback(it, x, rec)
        if abs(prev - cost) <= cfg.outer_tol * abs(prev):
            report.converged = True
            break
        prev = cost
        eps = max(eps / cfg.gamma, floor)
    return x, report


def solve(b, A: AcquisitionOperator, filt: FilterSupport, cfg: IrlsConfig,
          backend: Backend | None = None, truth=None) -> tuple[ComplexVolume, SolveReport]:
    """Reconstruct a k-space series from measurements ``b`` (shape ``(J, t, p, q)``).

    When a k-space ``truth`` is given, every iteration record carries its SNR.
    """
    filt.check_fits(A.shape)
    if np.shape(b) != (A.n_coils,) + A.shape:
        raise ValueError(f"measurements {np.shape(b)} do not match operator {(A.n_coils,) + A.shape}")
    backend = backend if backend is not None else FastBackend(A.shape, filt)
    callback = None
    if truth is not None:
        from .analysis import snr_db

        def callback(it, x, rec):
            rec.snr_db = snr_db(truth, x)

    x, report = run_irls(b, A, backend, cfg, callback)
    return ComplexVolume(x), report


def surrogate_cost(rho_hat, b, A: AcquisitionOperator, filt: FilterSupport, eps: float, mu: float,
                   p: float) -> float:
    """Smoothed Schatten cost of the hybrid lifting plus the data term."""
    x = np.asarray(as_array(rho_hat), dtype=np.complex128)
    dec = FastBackend(x.shape, filt).decompose(x)
    return penalty_value(dec.eigvals, eps, p) + data_term(x, b, A, mu)[0]


# ---------------------------------------------------------------- sweep

@dataclass
class SweepResult:
    best_mu: float
    table: list[tuple[float, float]]
    reports: dict[float, SolveReport]
    best_recon: ComplexVolume

    @property
    def best_snr(self) -> float:
        return dict(self.table)[self.best_mu]


def mu_sweep(b, A: AcquisitionOperator, filt: FilterSupport, cfg: IrlsConfig, grid, truth,
             backend: Backend | None = None) -> SweepResult:
    """Solve once per ``mu`` and keep the one with the best SNR against ``truth``.

    Ties go to the smaller ``mu``.
    """
    from .analysis import snr_db

    grid = sorted(float(m) for m in grid)
    if not grid:
        raise ValueError("mu grid is empty")
    backend = backend if backend is not None else FastBackend(A.shape, filt)
    table, reports = [], {}
    best = (-np.inf, None, None)
    for mu in grid:
        rec, rep = solve(b, A, filt, cfg.with_mu(mu), backend, truth)
        snr = snr_db(truth, rec)
        table.append((mu, snr))
        reports[mu] = rep
        if snr > best[0]:
            best = (snr, mu, rec)
    if best[1] is None:
        warnings.warn("no reconstruction in the sweep produced a finite SNR")
        best = (table[0][1], grid[0], solve(b, A, filt, cfg.with_mu(grid[0]), backend)[0])
    return SweepResult(best[1], table, reports, best[2])
