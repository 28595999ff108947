import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mshe.noise import (
    AdditiveDiagonal,
    DiagonalMultiplicative,
    DiffusionSpec,
    NoiseSource,
    ScalarMultiplicative,
    diffusion_increment,
    hilbert_schmidt_norm,
    sample_increments,
    verify_lipschitz,
)
from mshe.spectral import RealBasis, SpectralField, random_field, sobolev_norm


@settings(max_examples=30)
@given(seed=st.integers(0, 2**63), path=st.integers(0, 10**6), step=st.integers(0, 10**6),
       n=st.integers(1, 60), extra=st.integers(1, 60))
def test_prefix_property(seed, path, step, n, extra):
    src = NoiseSource(seed, path)
    short = src.increments(step, 0.01, n)
    long = src.increments(step, 0.01, n + extra)
    np.testing.assert_array_equal(short, long[:n])


def test_streams_are_deterministic_and_distinct():
    a = NoiseSource(5, 0).increments(3, 1.0, 10)
    np.testing.assert_array_equal(a, NoiseSource(5, 0).increments(3, 1.0, 10))
    assert not np.array_equal(a, NoiseSource(5, 1).increments(3, 1.0, 10))
    assert not np.array_equal(a, NoiseSource(6, 0).increments(3, 1.0, 10))
    assert not np.array_equal(a, NoiseSource(5, 0).increments(4, 1.0, 10))


def test_cached_generator_does_not_leak_between_calls():
    src = NoiseSource(1, 2)
    first = src.increments(7, 1.0, 5)
    src.increments(8, 1.0, 1000)
    np.testing.assert_array_equal(src.increments(7, 1.0, 5), first)


def test_sample_increments_advances_counter():
    src = NoiseSource(0, 0)
    a = sample_increments(src, 0.25, 4)
    b = sample_increments(src, 0.25, 4)
    assert src.step == 2
    np.testing.assert_array_equal(b, NoiseSource(0, 0).increments(1, 0.25, 4))
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        sample_increments(src, 0.0, 4)


def test_increments_are_gaussian_with_variance_dt():
    dt = 0.04
    src = NoiseSource(11, 0)
    x = np.concatenate([src.increments(s, dt, 50) for s in range(400)])
    assert stats.kstest(x / math.sqrt(dt), "norm").pvalue > 1e-3
    assert abs(x.var() / dt - 1) < 0.05


def test_refinement_sums_fine_increments():
    R, dt = 4, 0.1
    fine = NoiseSource(3, 1)
    coarse = NoiseSource(3, 1, refinement=R)
    for step in range(3):
        want = sum(fine.increments(step * R + i, dt / R, 6) for i in range(R))
        np.testing.assert_allclose(coarse.increments(step, dt, 6), want, rtol=1e-14)
    with pytest.raises(ValueError):
        NoiseSource(0, 0, refinement=0)


def test_additive_on_shells_layout():
    spec = AdditiveDiagonal.on_shells({1: 0.5, 2: 0.7})
    # slot 0 constant, then 4 slots on shell 1 and 4 on shell 2
    assert spec.sigma == (0.0,) + (0.5,) * 4 + (0.7,) * 4


def test_additive_increment_is_sum_of_scaled_basis_functions():
    K = 3
    basis = RealBasis(K, 2 * K * K)
    spec = AdditiveDiagonal((0.2, 0.0, 1.5, -0.3))
    dW = np.array([0.1, 2.0, -0.4, 0.9])
    got = diffusion_increment(SpectralField.zeros(K), spec, dW, basis)
    want = SpectralField.zeros(K)
    for j in range(4):
        want = want + basis.basis_function(j) * (spec.sigma[j] * dW[j])
    np.testing.assert_allclose(got.coeffs, want.coeffs, atol=1e-15)
    with pytest.raises(ValueError):
        diffusion_increment(SpectralField.zeros(K), spec, dW[:3], basis)


def test_hs_norm_additive_closed_form():
    K = 4
    basis = RealBasis(K, 2 * K * K)
    spec = AdditiveDiagonal.on_shells({1: 0.5, 4: 2.0})
    m = 0.75
    # ||sigma_j w_j||_{2m}^2 = sigma_j^2 (1 + lam_j)^{2m}
    want = math.sqrt(4 * 0.25 * 2**1.5 + 4 * 4.0 * 5**1.5)
    u = random_field(K, np.random.default_rng(0))
    assert hilbert_schmidt_norm(u, spec, m, basis) == pytest.approx(want, rel=1e-13)
    assert spec.growth_constant(basis, m) == pytest.approx(want, rel=1e-13)


def test_scalar_multiplicative():
    u = random_field(4, np.random.default_rng(1))
    spec = ScalarMultiplicative(0.3)
    d = diffusion_increment(u, spec, [2.0])
    np.testing.assert_allclose(d.coeffs, 0.6 * u.coeffs)
    assert hilbert_schmidt_norm(u, spec, 1.0) == pytest.approx(0.3 * sobolev_norm(u, 2.0), rel=1e-13)


def test_diagonal_multiplicative_acts_mode_by_mode():
    K = 3
    basis = RealBasis(K, 2 * K * K)
    u = random_field(K, np.random.default_rng(2))
    g = (0.1, 0.2, 0.3)
    spec = DiagonalMultiplicative(g)
    a = basis.to_real(u.coeffs)
    d = basis.to_real(diffusion_increment(u, spec, [1.0, -1.0, 2.0], basis).coeffs)
    np.testing.assert_allclose(d[:3], [0.1 * a[0], -0.2 * a[1], 0.6 * a[2]], atol=1e-15)
    assert np.all(d[3:] == 0)


@pytest.mark.parametrize("spec", [AdditiveDiagonal((0.5, 0.5)), ScalarMultiplicative(0.4),
                                  DiagonalMultiplicative(0.7), DiagonalMultiplicative((0.1, 0.9, 0.3))])
def test_lipschitz_bound_holds_on_samples(spec):
    rep = verify_lipschitz(spec, 1.0, 40, K=3)
    assert rep.certified
    assert rep.samples == 40


def test_growth_bound_holds_on_samples():
    K = 4
    basis = RealBasis(K, 2 * K * K)
    rng = np.random.default_rng(4)
    for spec in (ScalarMultiplicative(0.4), DiagonalMultiplicative(0.6), AdditiveDiagonal.on_shells({2: 1.0})):
        for m in (0.0, 1.0):
            kappa = spec.growth_constant(basis, m)
            for _ in range(10):
                u = random_field(K, rng, amplitude=rng.uniform(0, 5))
                assert hilbert_schmidt_norm(u, spec, m, basis) <= kappa * (1 + sobolev_norm(u, 2 * m)) + 1e-12


@pytest.mark.parametrize("spec", [AdditiveDiagonal((0.1, 0.2)), ScalarMultiplicative(0.5),
                                  DiagonalMultiplicative(0.3), DiagonalMultiplicative((1.0, 2.0))])
def test_spec_dict_round_trip(spec):
    assert DiffusionSpec.from_dict(spec.to_dict()) == spec


def test_spec_rejects_unknown_kind_and_oversized_sigma():
    with pytest.raises(ValueError):
        DiffusionSpec.from_dict({"kind": "bogus"})
    with pytest.raises(ValueError):
        AdditiveDiagonal((1.0,) * 100).n_directions(RealBasis(1, 2))
