"""Acceptance criteria 1-10 on scaled-down synthetic data.

Each criterion prints one ``PASS``/``FAIL`` line (collected again in the
pytest terminal summary).  Tolerances are the pinned acceptance values;
where the setup had to be adapted (mu grid, iteration budgets) the choice is
fixed here and justified in the project's decisions ledger.

Run alone with ``pytest -v tests/test_acceptance.py``; the whole file takes
roughly 33 minutes on one core, dominated by the 32x32x4 filter runs.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, crandn
from harness import circular_reconstruct
from expslr.analysis import fit_t2, snr_db, t2_error_map
from expslr.direct import DeadlineExceeded, DirectBackend, direct_irls_reconstruct
from expslr.fastops import gram_matrix, hybrid_vs_valid_gap
from expslr.forward import AcquisitionOperator
from expslr.irls import FastBackend, IrlsConfig, mu_sweep, run_irls, solve
from expslr.lifting import (FilterSupport, annihilating_filter_from_betas, annihilation_residual,
                            build_lifted, numerical_rank)
from expslr.phantom import (ParameterMaps, acquire, coil_sensitivities, gaussian_blob_maps,
                            mask_cartesian_vd, mask_uniform_random, synthesize_series, uniform_beta_maps)
from expslr.volume import fft2_frames

pytestmark = pytest.mark.slow

MU_GRID = [10.0 ** k for k in range(1, 8)]  # 7-point log grid
DELTA_TE = 10.0


def report(n, ok, detail):
    line = f"criterion {n:>3}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert ok, line


class Case:
    """Normalised phantom, measurements and operator (image peak 1)."""

    def __init__(self, shape=(12, 64, 64), l=2, coils=0, mask="uniform", fraction=0.3,
                 sigma=0.005, maps=None):
        t, p, q = shape
        self.maps = maps if maps is not None else gaussian_blob_maps(p, q, l, seed=1, delta_te=DELTA_TE)
        img = np.array(synthesize_series(self.maps, t))
        self.image = img / np.abs(img).max()
        self.truth = fft2_frames(self.image)
        if mask == "uniform":
            masks = mask_uniform_random(p, q, t, fraction, seed=2)
        else:
            masks = mask_cartesian_vd(p, q, t, 2, 3.0, seed=2)
        cs = coil_sensitivities(p, q, coils, seed=4) if coils else None
        meas = acquire(self.image, cs, masks, sigma, seed=3)
        self.b = meas.kspace
        self.A = AcquisitionOperator(meas.mask, None if cs is None else cs.maps)
        self.zero_filled_snr = snr_db(self.truth, self.A.apply_adjoint(self.b))


def image_of(k):
    return np.fft.ifft2(np.asarray(k), axes=(-2, -1), norm="ortho")


# ---------------------------------------------------------------- shared fixtures

@pytest.fixture(scope="module")
def case6():
    return Case()


@pytest.fixture(scope="module")
def sweep6(case6):
    cfg = IrlsConfig(mu=1.0, p=0.6, max_iters=30)
    t0 = time.perf_counter()
    res = mu_sweep(case6.b, case6.A, FilterSupport(16, 16, 4), cfg, MU_GRID, case6.truth)
    return res, time.perf_counter() - t0


# ---------------------------------------------------------------- 1-3: exact structure

def test_c1_annihilation_exactness():
    t0 = time.perf_counter()
    maps = uniform_beta_maps(32, 32, 0.9, seed=1, delta_te=DELTA_TE)
    x = fft2_frames(synthesize_series(maps, 8))
    filt = FilterSupport(1, 1, 2)
    d = annihilating_filter_from_betas([0.9], filt)
    res = annihilation_residual(x, d, filt)
    dt = time.perf_counter() - t0
    report(1, res <= 1e-10 and dt < 5, f"annihilation residual {res:.2e} (<= 1e-10), {dt:.2f} s (< 5 s)")


def test_c2_rank_bound():
    maps = uniform_beta_maps(12, 12, 0.85, seed=5, delta_te=DELTA_TE)
    x = fft2_frames(synthesize_series(maps, 8))
    lam = FilterSupport(3, 3, 3)
    T = build_lifted(x, lam, "valid")
    r = numerical_rank(T, rel_tol=1e-8)
    bound = lam.size - (3 - 1 + 1) * (3 - 1 + 1) * (3 - 2 + 1)
    report(2, r <= bound, f"valid-lifting numerical rank {r} (<= {bound})")


def test_c3_gram_equivalence():
    t0 = time.perf_counter()
    filt = FilterSupport(4, 4, 2)
    errs = []
    for seed in range(5):
        x = crandn(np.random.default_rng(seed), 5, 12, 12)
        T = build_lifted(x, filt, "hybrid").matrix
        R = T.T @ T.conj()
        errs.append(np.linalg.norm(gram_matrix(x, filt).matrix - R) / np.linalg.norm(R))
    dt = time.perf_counter() - t0
    report(3, max(errs) <= 1e-10 and dt < 10,
           f"max relative Gram error over 5 seeds {max(errs):.2e} (<= 1e-10), {dt:.2f} s (< 10 s)")


# ---------------------------------------------------------------- 4-5: fast vs direct

def test_c4_solver_equivalence():
    c = Case(shape=(6, 16, 16), l=1, fraction=0.4)
    filt = FilterSupport(8, 8, 3)
    cfg = IrlsConfig(mu=1e3, p=1.0, max_iters=10, outer_tol=1e-300, keep_iterates=True)
    _, rf = solve(c.b, c.A, filt, cfg)
    _, rd = direct_irls_reconstruct(c.b, c.A, filt, cfg)
    gaps = [np.linalg.norm(a - b) / np.linalg.norm(b) for a, b in zip(rf.iterates, rd.iterates)]
    ok = len(gaps) == 10 and max(gaps) <= 1e-8
    report(4, ok, f"{len(gaps)} iterations, max relative iterate gap {max(gaps):.2e} (<= 1e-8)")


def test_c5a_fast_beats_direct_small():
    c = Case(shape=(8, 32, 32), l=2)
    filt = FilterSupport(16, 16, 3)
    cfg = IrlsConfig(mu=1e4, p=0.6, max_iters=3, outer_tol=1e-300)
    t0 = time.perf_counter()
    solve(c.b, c.A, filt, cfg)
    t_fast = time.perf_counter() - t0
    t0 = time.perf_counter()
    direct_irls_reconstruct(c.b, c.A, filt, cfg)
    t_direct = time.perf_counter() - t0
    report("5a", t_fast < t_direct,
           f"32x32x8, filter 16x16x3, 3 iterations: fast {t_fast:.1f} s < direct {t_direct:.1f} s "
           f"(ratio {t_direct / t_fast:.1f}x)")


def test_c5b_direct_infeasible_at_full_size(case6):
    filt = FilterSupport(32, 32, 4)
    cfg = IrlsConfig(mu=1e4, p=0.6, max_iters=1, outer_tol=1e-300)
    t0 = time.perf_counter()
    run_irls(case6.b, case6.A, FastBackend(case6.A.shape, filt), cfg)
    t_fast = time.perf_counter() - t0
    budget = 5 * t_fast
    t0 = time.perf_counter()
    try:
        run_irls(case6.b, case6.A, DirectBackend(case6.A.shape, filt, time_budget=budget), cfg)
        outcome, ok = "finished", False
    except DeadlineExceeded:
        outcome, ok = "exceeded the 5x budget", True
    except MemoryError as exc:  # DenseCapError, or the machine running out first
        outcome, ok = f"exceeded the dense cap ({type(exc).__name__})", True
    t_direct = time.perf_counter() - t0
    report("5b", ok, f"64x64x12, filter 32x32x4, 1 iteration: fast {t_fast:.1f} s; direct {outcome} "
                     f"after {t_direct:.1f} s (budget {budget:.1f} s)")


# ---------------------------------------------------------------- 6-8: reconstruction quality

def test_c6_reconstruction_quality(case6, sweep6):
    res, dt = sweep6
    gain = res.best_snr - case6.zero_filled_snr
    fit_true = fit_t2(case6.image, DELTA_TE)
    fit_rec = fit_t2(image_of(res.best_recon), DELTA_TE)
    err = t2_error_map(fit_true, fit_rec, fit_true.valid_mask)
    ok = gain >= 5 and err.median < 0.10 and dt < 600
    table = ", ".join(f"{m:.0e}:{s:.1f}" for m, s in res.table)
    report(6, ok, f"best mu {res.best_mu:.0e}: SNR {res.best_snr:.2f} dB vs zero-filled "
                  f"{case6.zero_filled_snr:.2f} dB (gain {gain:.2f} >= 5); median T2 error "
                  f"{err.median:.4f} (< 0.10); sweep {dt:.0f} s (< 600 s) [{table}]")


def test_c6_interior_optimum(case6, sweep6):
    res, _ = sweep6
    snrs = dict(res.table)
    margin = res.best_snr - max(snrs[MU_GRID[0]], snrs[MU_GRID[-1]])
    report("6i", margin >= 0.1, f"best-mu SNR exceeds both grid endpoints by {margin:.2f} dB (>= 0.1)")


def test_c7_filter_size_trend(case6, sweep6):
    iters = 15
    cfg = IrlsConfig(mu=1.0, p=0.6, max_iters=iters)
    snr = {}
    for dims in ((64, 64, 4), (32, 32, 1)):
        r = mu_sweep(case6.b, case6.A, FilterSupport(*dims), cfg, MU_GRID, case6.truth)
        snr[dims] = (r.best_snr, r.best_mu)
    mu = sweep6[0].best_mu
    rec, _ = solve(case6.b, case6.A, FilterSupport(32, 32, 4), cfg.with_mu(mu))
    snr[(32, 32, 4)] = (snr_db(case6.truth, rec), mu)
    ref = snr[(32, 32, 4)][0]
    ok = ref > snr[(64, 64, 4)][0] and ref > snr[(32, 32, 1)][0]
    detail = "; ".join(f"{a}x{b}x{c}: {s:.2f} dB (mu {m:.0e})" for (a, b, c), (s, m) in snr.items())
    report(7, ok, f"{iters} iterations each; {detail}; need 32x32x4 above both")


def test_c8_multichannel():
    c = Case(coils=4, mask="cartesian_vd")
    A = c.A
    rng = np.random.default_rng(8)
    adj = []
    for _ in range(20):
        x = crandn(rng, *A.shape)
        y = crandn(rng, A.n_coils, *A.shape)
        lhs = np.vdot(y, A.apply(x))
        adj.append(abs(lhs - np.vdot(A.apply_adjoint(y), x)) / abs(lhs))
    accel = A.mask.size / A.mask.sum()
    cfg = IrlsConfig(mu=1.0, p=0.7, max_iters=30)
    res = mu_sweep(c.b, A, FilterSupport(16, 16, 4), cfg, MU_GRID, c.truth)
    gain = res.best_snr - c.zero_filled_snr
    ok = gain >= 5 and max(adj) <= 1e-10
    report(8, ok, f"4 coils, acceleration {accel:.2f}: SNR {res.best_snr:.2f} dB (mu {res.best_mu:.0e}) vs "
                  f"zero-filled {c.zero_filled_snr:.2f} dB (gain {gain:.2f} >= 5); max adjoint mismatch "
                  f"{max(adj):.1e} (<= 1e-10)")


# ---------------------------------------------------------------- 9: monotonicity

def _worst_increase(rep):
    costs = np.concatenate([[rep.initial_cost], rep.costs])
    return float(np.max((costs[1:] - costs[:-1]) / np.abs(costs[:-1])))


def test_c9_monotonicity(case6, sweep6):
    c4 = Case(shape=(6, 16, 16), l=1, fraction=0.4)
    frozen = dict(gamma=1.0, max_iters=20, outer_tol=1e-300)
    _, r4 = solve(c4.b, c4.A, FilterSupport(8, 8, 3), IrlsConfig(mu=1e3, p=1.0, **frozen))
    _, r6 = solve(case6.b, case6.A, FilterSupport(16, 16, 4),
                  IrlsConfig(mu=sweep6[0].best_mu, p=0.6, **frozen))
    w4, w6 = _worst_increase(r4), _worst_increase(r6)
    ok = r4.n_iters == 20 and r6.n_iters == 20 and max(w4, w6) <= 1e-10
    report(9, ok, f"gamma=1, 20 iterations: largest relative cost increase {w4:.1e} (criterion-4 "
                  f"instance), {w6:.1e} (criterion-6 instance); slack 1e-10")


# ---------------------------------------------------------------- 10: hybrid approximation

def test_c10_gap(case6):
    t, p, q = case6.A.shape
    c = np.fft.fftfreq(p) * p
    low = (np.abs(c) < 16)[:, None] & (np.abs(c) < 16)[None, :]
    band = np.where(low, case6.truth, 0)
    filt = FilterSupport(8, 8, 3)
    g_band = hybrid_vs_valid_gap(band, filt)
    g_flat = hybrid_vs_valid_gap(crandn(np.random.default_rng(10), t, p, q), filt)
    report("10a", g_band <= 1e-6 and g_flat > 0.1,
           f"gap {g_band:.1e} for band-limited phantom (<= 1e-6), {g_flat:.3f} for flat spectrum (> 0.1)")


def _circular_vs_hybrid(maps):
    c = Case(shape=(12, 32, 32), maps=maps)
    filt = FilterSupport(8, 8, 4)
    cfg = IrlsConfig(mu=1e3, p=0.6, max_iters=30)
    xh, _ = solve(c.b, c.A, filt, cfg)
    xc, _ = circular_reconstruct(c.b, c.A, filt, cfg)
    return snr_db(c.truth, xh), snr_db(c.truth, xc)


def test_c10_circular_time_non_decaying():
    maps = gaussian_blob_maps(32, 32, 2, seed=1, delta_te=DELTA_TE)
    const = ParameterMaps(maps.amplitude_maps, np.full(maps.t2_maps.shape, 1e12), DELTA_TE)
    hyb, circ = _circular_vs_hybrid(const)
    report("10b", hyb - circ >= 3, f"non-decaying phantom: hybrid {hyb:.2f} dB, circular time {circ:.2f} dB "
                                   f"(degradation {hyb - circ:.2f} dB, need >= 3)")


def test_c10_circular_time_decaying():
    hyb, circ = _circular_vs_hybrid(gaussian_blob_maps(32, 32, 2, seed=1, delta_te=DELTA_TE))
    report("10c", hyb - circ >= 3, f"decaying phantom: hybrid {hyb:.2f} dB, circular time {circ:.2f} dB "
                                   f"(degradation {hyb - circ:.2f} dB, need >= 3)")
