"""Low-rank structured reconstruction of exponential image series.

The k-space series of an image whose pixels are sums of damped exponentials
is annihilated by small 3-D filters, so its multi-fold Toeplitz lifting is low
rank.  This package recovers such series from undersampled multi-coil
measurements by iteratively reweighted least squares on that lifting, using
FFT-based Gram matrices and per-pixel regularizer kernels.
"""
from .volume import ComplexVolume, read_cser, write_cser, fft2_frames, as_casorati
from .lifting import FilterSupport, LiftedMatrix, build_lifted, annihilation_residual, numerical_rank
from .forward import AcquisitionOperator
from .irls import IrlsConfig, SolveReport, solve, mu_sweep, cg_solve, surrogate_cost
from .analysis import fit_t2, snr_db, t2_error_map

__all__ = [
    "ComplexVolume", "read_cser", "write_cser", "fft2_frames", "as_casorati",
    "FilterSupport", "LiftedMatrix", "build_lifted", "annihilation_residual", "numerical_rank",
    "AcquisitionOperator",
    "IrlsConfig", "SolveReport", "solve", "mu_sweep", "cg_solve", "surrogate_cost",
    "fit_t2", "snr_db", "t2_error_map",
]
__version__ = "0.1.0"
