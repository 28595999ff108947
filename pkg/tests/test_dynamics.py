import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import convolve2d

from mshe.dynamics import (
    LINEAR_ONLY,
    CutoffConfig,
    DriftToggles,
    cutoff_drift,
    cutoff_factor,
    drift_abstract,
    drift_raw,
    nonlinear_terms,
)
from mshe.spectral import ModelParams, SpectralField, SpectralGrid, random_field, sobolev_norm, wavenumbers


def field(K, seed, amp=1.0):
    return random_field(K, np.random.default_rng(seed), amplitude=amp, decay=1.0)


def exact_product_coeffs(c, b):
    """b |grad u|^2 + u^3 by exact discrete convolution, then cut back to the box."""
    K = (c.shape[0] - 1) // 2
    k, l = wavenumbers(K)
    cubic = convolve2d(convolve2d(c, c), c)
    grad = convolve2d(1j * k * c, 1j * k * c) + convolve2d(1j * l * c, 1j * l * c)
    cubic = cubic[2 * K:4 * K + 1, 2 * K:4 * K + 1]
    grad = grad[K:3 * K + 1, K:3 * K + 1]
    return cubic + b * grad


@settings(max_examples=15, deadline=None)
@given(K=st.integers(1, 8), seed=st.integers(0, 10_000), b=st.floats(-4, 4))
def test_dealiased_nonlinearity_matches_exact_convolution(K, seed, b):
    u = field(K, seed)
    got = nonlinear_terms(u, ModelParams(0.0, b), SpectralGrid(K)).coeffs
    want = exact_product_coeffs(u.coeffs, b)
    assert np.abs(got - want).max() <= 1e-11 * max(1.0, np.abs(want).max())


def test_nonlinearity_is_independent_of_padding():
    u = field(6, 2)
    p = ModelParams(0.3, 2.0)
    a = nonlinear_terms(u, p, SpectralGrid(6)).coeffs
    b = nonlinear_terms(u, p, SpectralGrid(6, M=20, dealias_pad_factor=3)).coeffs
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-2, 5), b=st.floats(-3.9, 3.9))
def test_abstract_and_raw_drift_agree(seed, a, b):
    u = field(8, seed)
    p = ModelParams(a, b)
    d1 = drift_abstract(u, p).coeffs
    d2 = drift_raw(u, p).coeffs
    assert np.abs(d1 - d2).max() <= 1e-10 * max(1.0, np.abs(d1).max())


def test_linear_drift_on_single_mode():
    # -(lam^2 - 2 lam + a) acting on cos(2x + y), lam = 5
    a = 0.7
    u = SpectralField.cosine(4, 2, 1)
    d = drift_abstract(u, ModelParams(a, 1.0), toggles=LINEAR_ONLY)
    np.testing.assert_allclose(d.coeffs, -(25 - 10 + a) * u.coeffs, atol=1e-12)


def test_constant_field_drift():
    # u = c constant: drift = -(a c + c^3)
    c = 0.8
    d = drift_raw(SpectralField.constant(3, c), ModelParams(0.5, 2.0))
    expect = SpectralField.constant(3, -(0.5 * c + c**3))
    np.testing.assert_allclose(d.coeffs, expect.coeffs, atol=1e-14)


def test_gradient_toggle():
    # |grad cos x|^2 = sin^2 x = (1 - cos 2x)/2
    u = SpectralField.cosine(4, 1, 0)
    nl = nonlinear_terms(u, ModelParams(0, 2.0), SpectralGrid(4), DriftToggles(True, False))
    expect = 2.0 * (SpectralField.constant(4, 0.5) - SpectralField.cosine(4, 2, 0, 0.5))
    np.testing.assert_allclose(nl.coeffs, expect.coeffs, atol=1e-14)
    assert np.all(nonlinear_terms(u, ModelParams(0, 2.0), SpectralGrid(4), LINEAR_ONLY).coeffs == 0)


def test_nonlinear_output_is_hermitian():
    nl = nonlinear_terms(field(7, 5), ModelParams(0, 3.0), SpectralGrid(7))
    assert nl.is_hermitian(1e-13)


def test_cutoff_values():
    cfg = CutoffConfig(3.0)
    assert cutoff_factor(0.0, cfg) == 1.0
    assert cutoff_factor(3.0, cfg) == 1.0
    assert cutoff_factor(3.5, cfg) == pytest.approx(0.5)
    assert cutoff_factor(4.0, cfg) == 0.0
    assert cutoff_factor(100.0, cfg) == 0.0
    assert cutoff_factor(1e9, None) == 1.0
    np.testing.assert_array_equal(cutoff_factor(np.array([1.0, 5.0]), cfg), [1.0, 0.0])


@settings(max_examples=50)
@given(r=st.floats(0, 20), s=st.floats(0, 20), N=st.floats(0.1, 10))
def test_cutoff_is_monotone_bounded_and_lipschitz(r, s, N):
    cfg = CutoffConfig(N)
    fr, fs = cutoff_factor(r, cfg), cutoff_factor(s, cfg)
    assert 0.0 <= fr <= 1.0
    if r <= s:
        assert fr >= fs
    # max slope of the quintic smoothstep is 15/8
    assert abs(fr - fs) <= 15 / 8 * abs(r - s) + 1e-12


def test_cutoff_is_twice_differentiable_at_the_joins():
    cfg = CutoffConfig(1.0)
    h = 1e-4
    for x in (1.0, 2.0):
        d2_left = (cutoff_factor(x, cfg) - 2 * cutoff_factor(x - h, cfg) + cutoff_factor(x - 2 * h, cfg)) / h**2
        d2_right = (cutoff_factor(x + 2 * h, cfg) - 2 * cutoff_factor(x + h, cfg) + cutoff_factor(x, cfg)) / h**2
        assert abs(d2_left) < 1e-2 and abs(d2_right) < 1e-2


def test_cutoff_rejects_nonpositive_threshold():
    with pytest.raises(ValueError):
        CutoffConfig(0.0)


def test_cutoff_drift_scales_only_f():
    u = field(5, 8, amp=3.0)
    p = ModelParams(0.5, 2.0)
    full = drift_abstract(u, p).coeffs
    A2 = -(SpectralGrid(5).A ** 2) * u.coeffs
    r = sobolev_norm(u, 2.0)
    d, delta = cutoff_drift(u, p, CutoffConfig(r - 0.5))
    assert 0 < delta < 1
    np.testing.assert_allclose(d.coeffs, A2 + delta * (full - A2), atol=1e-10)
    d_big, one = cutoff_drift(u, p, CutoffConfig(r + 1))
    assert one == 1.0
    np.testing.assert_array_equal(d_big.coeffs, full)
