import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expslr import phantom as ph
from expslr.lifting import (
    DenseCapError,
    FilterSupport,
    annihilating_filter_from_betas,
    annihilation_residual,
    build_lifted,
    lifted_rows,
    numerical_rank,
    valid_shift_count,
)

from conftest import crandn


def brute_conv(x, d, filt, mode):
    """Triple-loop 3-D convolution over the mode's output set."""
    t, p, q = x.shape
    n1, n2, m = filt.dims
    d = d.reshape(m, n1, n2)
    if mode == "valid":
        ks1, ks2 = range(n1 - 1, p), range(n2 - 1, q)
    else:
        ks1, ks2 = range(p), range(q)
    out = []
    for n in range(m - 1, t):
        for k1 in ks1:
            for k2 in ks2:
                acc = 0j
                for l in range(m):
                    for a in range(n1):
                        for b in range(n2):
                            i1, i2 = k1 - a, k2 - b
                            if mode == "hybrid":
                                i1, i2 = i1 % p, i2 % q
                            elif i1 < 0 or i2 < 0:
                                continue
                            acc += x[n - l, i1, i2] * d[l, a, b]
                out.append(acc)
    return np.array(out)


def test_valid_shift_count_examples():
    assert valid_shift_count((8, 8, 6), (3, 3, 2)) == 180
    assert valid_shift_count((5, 4, 3), (5, 4, 3)) == 1
    assert valid_shift_count((128, 128, 12), (102, 102, 10)) == 2187
    with pytest.raises(ValueError):
        valid_shift_count((4, 4, 4), (5, 1, 1))


def test_single_pixel_is_toeplitz(rng):
    x = crandn(rng, 6, 1, 1)
    T = build_lifted(x, FilterSupport(1, 1, 3), "valid").matrix
    assert T.shape == (4, 3)
    expect = np.array([[x[n - l, 0, 0] for l in range(3)] for n in range(2, 6)])
    assert np.array_equal(T, expect)


@pytest.mark.parametrize("mode", ["valid", "hybrid", "linear"])
def test_matvec_equals_brute_force_convolution(rng, mode):
    x = crandn(rng, 4, 8, 8)
    filt = FilterSupport(3, 3, 2)
    d = crandn(rng, filt.size)
    L = build_lifted(x, filt, mode)
    assert L.rows == lifted_rows(x.shape, filt, mode)
    assert np.allclose(L @ d, brute_conv(x, d, filt, mode), atol=1e-12, rtol=0)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_matvec_property_random_shapes(m, n1, n2, seed):
    rng = np.random.default_rng(seed)
    x = crandn(rng, m + 1, n1 + 2, n2 + 1)
    filt = FilterSupport(n1, n2, m)
    d = crandn(rng, filt.size)
    for mode in ("valid", "hybrid"):
        assert np.allclose(build_lifted(x, filt, mode) @ d, brute_conv(x, d, filt, mode), atol=1e-11)


def test_row_counts():
    filt = FilterSupport(3, 3, 2)
    assert lifted_rows((4, 8, 8), filt, "hybrid") == 192
    assert lifted_rows((4, 8, 8), filt, "valid") == 6 * 6 * 3


def test_filter_must_fit_and_cap(rng):
    with pytest.raises(ValueError):
        build_lifted(crandn(rng, 2, 4, 4), FilterSupport(5, 1, 1))
    with pytest.raises(DenseCapError):
        build_lifted(crandn(rng, 4, 8, 8), FilterSupport(3, 3, 2), cap=100)
    with pytest.raises(ValueError):
        FilterSupport(0, 1, 1)


def test_filter_from_betas():
    f = FilterSupport(2, 2, 3)
    d = annihilating_filter_from_betas([0.5], FilterSupport(1, 1, 2))
    assert np.allclose(d, [1, -0.5])
    d = annihilating_filter_from_betas([0.5, 0.8], FilterSupport(1, 1, 3))
    assert np.allclose(d, [1, -1.3, 0.4])
    d = annihilating_filter_from_betas([0.5], f)
    assert d[0] == 1 and d[4] == -0.5 and np.count_nonzero(d) == 2
    d = annihilating_filter_from_betas([], f)
    assert d[0] == 1 and np.count_nonzero(d) == 1
    with pytest.raises(ValueError):
        annihilating_filter_from_betas([0.5, 0.6], FilterSupport(1, 1, 2))


def test_annihilation_exact_for_uniform_beta():
    maps = ph.uniform_beta_maps(16, 16, 0.7, seed=0)
    x = np.fft.fft2(ph.synthesize_series(maps, 6).data, norm="ortho")
    filt = FilterSupport(3, 3, 2)
    d = annihilating_filter_from_betas([0.7], filt)
    assert annihilation_residual(x, d, filt) <= 1e-10


def test_annihilation_random_and_zero(rng):
    filt = FilterSupport(2, 2, 2)
    x = crandn(rng, 5, 6, 6)
    assert annihilation_residual(x, crandn(rng, filt.size), filt) > 1e-3
    assert annihilation_residual(np.zeros((5, 6, 6)), crandn(rng, filt.size), filt) == 0.0
    # the empty-product delta annihilates only zero data
    assert annihilation_residual(x, annihilating_filter_from_betas([], filt), filt) > 1e-3


def test_numerical_rank_examples():
    assert numerical_rank(np.eye(5)) == 5
    assert numerical_rank(np.zeros((4, 3))) == 0
    with pytest.raises(DenseCapError):
        numerical_rank(np.zeros((20, 20)), cap=100)


def test_rank_bound_from_nullspace_inflation():
    maps = ph.uniform_beta_maps(12, 12, 0.8, seed=1)
    x = np.fft.fft2(ph.synthesize_series(maps, 8).data, norm="ortho")
    lam = FilterSupport(3, 3, 3)
    bound = lam.size - valid_shift_count(lam.dims, (1, 1, 2))
    assert bound == 9
    assert numerical_rank(build_lifted(x, lam, "valid").matrix, 1e-8) <= bound


def test_larger_support_never_shrinks_nullspace():
    maps = ph.uniform_beta_maps(12, 12, 0.8, seed=2)
    x = np.fft.fft2(ph.synthesize_series(maps, 8).data, norm="ortho")
    prev_null, prev_res = -1, np.inf
    for dims in [(1, 1, 2), (2, 2, 2), (2, 2, 3), (3, 3, 3)]:
        filt = FilterSupport(*dims)
        T = build_lifted(x, filt, "valid").matrix
        sv = np.linalg.svd(T, compute_uv=False)
        null = filt.size - numerical_rank(T)
        res = sv[-1] / np.linalg.norm(T)
        assert null >= prev_null
        assert res <= max(prev_res, 1e-12)
        prev_null, prev_res = null, res
