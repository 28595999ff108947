import math

import numpy as np
import pytest

from mshe.dynamics import LINEAR_ONLY
from mshe.estimators import (
    Coupling,
    EnsembleConfig,
    compare_moments,
    cutoff_coincidence,
    estimate_stop_probability,
    estimate_sup_moment,
    feller_probe,
    galerkin_convergence,
    path_dissipation,
    path_sup_moment,
    stop_probability_sweep,
    timestep_convergence,
    transition_expectation,
)
from mshe.integrator import SimulationConfig, run_trajectory
from mshe.invariant import constant_observable, mode_amplitude_sq, mode_coefficient, saturated_mode
from mshe.noise import AdditiveDiagonal
from mshe.spectral import ModelParams, SpectralField, SpectralGrid, random_field

NO_NOISE = AdditiveDiagonal(())


def ou_cfg(K=1, a=2.0, sigma=1.0, dt=0.01, t_end=0.5):
    return SimulationConfig(SpectralGrid(K), ModelParams(a, 0.0), AdditiveDiagonal.on_shells({1: sigma}),
                            toggles=LINEAR_ONLY, dt=dt, t_end=t_end)


def nonlinear_cfg(K=4, **kw):
    base = dict(dt=2e-3, t_end=0.1)
    base.update(kw)
    return SimulationConfig(SpectralGrid(K), ModelParams(0.5, 2.0), AdditiveDiagonal.on_shells({1: 0.5}), **base)


def test_ensemble_config():
    e = EnsembleConfig(4, 7)
    assert e.seed_for(0) == e.seed_for(3) == 7
    ind = EnsembleConfig(4, 7, Coupling.INDEPENDENT)
    assert ind.seed_for(0) == 7
    assert len({ind.seed_for(s) for s in range(5)}) == 5
    assert ind.seed_for(2) == EnsembleConfig(9, 7, "independent").seed_for(2)
    with pytest.raises(ValueError):
        EnsembleConfig(0)


def test_zero_start_without_noise_gives_zero_moments_and_no_stops():
    cfg = SimulationConfig(SpectralGrid(3), ModelParams(0.5, 2.0), NO_NOISE, dt=0.01, t_end=0.2)
    rep = estimate_sup_moment(SpectralField.zeros(3), cfg, EnsembleConfig(3), m=1, p=2)
    assert rep.sup_moment == 0 and rep.dissipation == 0 and rep.sup_moment_se == 0
    assert not rep.conditional and not rep.anomalous
    for kind in ("xi", "eta"):
        for row in stop_probability_sweep(SpectralField.zeros(3), cfg, EnsembleConfig(3), kind, [1.0, 2.0], 0.2):
            assert row.hits == 0 and row.estimate == 0 and row.ci_low == 0
    with pytest.raises(ValueError):
        estimate_sup_moment(SpectralField.zeros(3), cfg, EnsembleConfig(1), p=1.0)


def test_path_functionals_on_deterministic_decay():
    # single mode, no noise: ||A u(t)|| = ||A u0|| exp(-rate t); dissipation integral is closed form
    a, lam = 2.0, 1.0
    rate = lam * lam - 2 * lam + a
    cfg = SimulationConfig(SpectralGrid(2), ModelParams(a, 0.0), NO_NOISE, dt=1e-4, t_end=0.5, toggles=LINEAR_ONLY)
    u0 = SpectralField.cosine(2, 1, 0)
    rec = run_trajectory(u0, cfg)
    n2 = rec.norm(2.0)[0]
    n4 = rec.norm(4.0)[0]
    assert path_sup_moment(rec, 1, 2.0, 0.5) == pytest.approx(n2**2)
    # p = 2: integral of ||A^2 u||^2 = n4^2 (1 - exp(-2 rate T)) / (2 rate)
    want = n4**2 * (1 - math.exp(-2 * rate * 0.5)) / (2 * rate)
    assert path_dissipation(rec, 1, 2.0, 0.5) == pytest.approx(want, rel=1e-3)


def test_ou_second_moment_matches_discrete_recursion():
    a, sigma, dt, n = 2.0, 1.0, 0.01, 50
    cfg = ou_cfg(a=a, sigma=sigma, dt=dt, t_end=n * dt)
    u0 = SpectralField.cosine(1, 1, 0, 1.0 / (math.sqrt(2) * math.pi))  # unit orthonormal coefficient
    obs = mode_amplitude_sq(1, 0, "cos")
    assert obs(u0) == pytest.approx(1.0)
    est = transition_expectation(obs, n * dt, u0, cfg, EnsembleConfig(2000, 1))
    mu, g = 4.0, 4.0 * 2 - (a + 3)
    rho = (1 + dt * g) / (1 + dt * mu)
    noise = sigma**2 * dt / (1 + dt * mu) ** 2
    want = rho ** (2 * n) + noise * (1 - rho ** (2 * n)) / (1 - rho**2)
    assert est.valid and est.n_blowups == 0
    assert abs(est.mean - want) <= 4 * est.se


def test_transition_expectation_at_time_zero_is_exact():
    u0 = random_field(3, np.random.default_rng(0))
    obs = mode_amplitude_sq(1, 1, "sin")
    est = transition_expectation(obs, 0.0, u0, nonlinear_cfg(K=3), EnsembleConfig(5))
    assert est.mean == obs(u0) and est.se == 0.0
    with pytest.raises(ValueError):
        transition_expectation(obs, -1.0, u0, nonlinear_cfg(K=3), EnsembleConfig(5))


def test_feller_probe_on_identical_starts_is_exactly_zero():
    u = random_field(3, np.random.default_rng(1))
    rep = feller_probe(u, u, saturated_mode(1, 0), 0.05, nonlinear_cfg(K=3), EnsembleConfig(4), levels=3)
    assert rep.intercept == 0.0
    assert rep.intercept_consistent_with_zero
    assert all(r.difference == 0.0 for r in rep.rows)


def test_feller_probe_linear_dynamics():
    # for a linear observable of a linear SDE the coupled difference is deterministic and linear in h
    cfg = ou_cfg(K=2, t_end=0.2)
    u1 = random_field(2, np.random.default_rng(2))
    u2 = u1 + SpectralField.cosine(2, 1, 0, 0.1)
    lin = mode_coefficient(1, 0, "cos")
    rep = feller_probe(u1, u2, lin, 0.2, cfg, EnsembleConfig(8), levels=4)
    hs = np.array([r.h for r in rep.rows])
    d = np.array([r.difference for r in rep.rows])
    np.testing.assert_allclose(d / hs, d[0] / hs[0], rtol=1e-9)
    assert rep.monotone
    assert abs(rep.intercept) < 1e-12
    with pytest.raises(ValueError):
        feller_probe(u1, u2, lin, 0.2, cfg, EnsembleConfig(8, coupling="independent"))


def test_galerkin_levels_decouple_for_linear_dynamics():
    # linear dynamics: shells evolve independently, so levels containing all forced and
    # initially excited shells agree exactly
    cfg = ou_cfg(K=3, t_end=0.1)
    u0 = SpectralField.cosine(3, 1, 0) + SpectralField.sine(3, 0, 1)
    rows = galerkin_convergence(u0, [1.0, 4.0, 9.0], cfg, EnsembleConfig(4))
    assert [r.error for r in rows] == [0.0, 0.0, 0.0]
    assert galerkin_convergence(u0, [9.0], cfg, EnsembleConfig(2))[0].error == 0.0


def test_galerkin_error_decreases_with_level():
    cfg = nonlinear_cfg(K=5, t_end=0.05)
    u0 = random_field(5, np.random.default_rng(3), amplitude=1.0, decay=1.0)
    rows = galerkin_convergence(u0, [2.0, 8.0, 18.0, 25.0], cfg, EnsembleConfig(4))
    errs = [r.error for r in rows]
    assert errs[-1] == 0.0
    assert errs[0] > errs[1] > errs[2] > 0
    with pytest.raises(ValueError):
        galerkin_convergence(u0, [100.0], cfg, EnsembleConfig(2))


def test_cutoff_coincidence_before_first_crossing():
    cfg = nonlinear_cfg(K=4, t_end=0.1)
    u0 = random_field(4, np.random.default_rng(4), amplitude=1.0)
    r0 = run_trajectory(u0, cfg).norm(2.0)[0]
    rows = cutoff_coincidence(u0, r0 * 1.02, r0 * 3, cfg, EnsembleConfig(6))
    assert all(r.max_diff_before == 0.0 for r in rows)
    crossed = [r for r in rows if r.zeta is not None]
    assert all(r.zeta > 0 for r in crossed)
    never = cutoff_coincidence(u0, 1e4, 2e4, cfg, EnsembleConfig(3))
    assert all(r.zeta is None and r.max_diff_before == 0.0 and r.max_diff_after == 0.0 for r in never)
    with pytest.raises(ValueError):
        cutoff_coincidence(u0, 2.0, 1.0, cfg, EnsembleConfig(1))


def test_stop_probability_is_monotone_in_threshold():
    cfg = nonlinear_cfg(K=4, t_end=0.1)
    u0 = random_field(4, np.random.default_rng(5), amplitude=1.5)
    n0 = run_trajectory(u0, cfg).norm(2.0)[0]
    rs = [0.5 * n0**2, 0.9 * n0**2, 2 * n0**2, 100 * n0**2]
    rows = stop_probability_sweep(u0, cfg, EnsembleConfig(10), "xi", rs, 0.1)
    est = [r.estimate for r in rows]
    assert est == sorted(est, reverse=True)
    assert est[0] == 1.0 and est[-1] == 0.0
    for r in rows:
        assert r.ci_low <= r.estimate <= r.ci_high
    # the crossing happens at t = 0, which is not strictly before t = 0
    assert estimate_stop_probability(u0, cfg, EnsembleConfig(3), "xi", rs[0], 0.0).estimate == 0.0
    with pytest.raises(ValueError):
        stop_probability_sweep(u0, cfg, EnsembleConfig(2), "rho", [1.0, 2.0], 0.1)
    with pytest.raises(ValueError):
        stop_probability_sweep(u0, cfg, EnsembleConfig(2), "bogus", [1.0], 0.1)


def test_markov_envelope_bounds_estimate():
    cfg = nonlinear_cfg(K=4, t_end=0.1)
    u0 = random_field(4, np.random.default_rng(5), amplitude=1.5)
    for row in stop_probability_sweep(u0, cfg, EnsembleConfig(10), "xi", [10.0, 50.0, 500.0], 0.1):
        assert row.estimate <= row.envelope + 1e-12


def test_compare_moments_pools_standard_errors():
    cfg = nonlinear_cfg(K=3, t_end=0.05)
    u0 = random_field(3, np.random.default_rng(6))
    a = estimate_sup_moment(u0, cfg, EnsembleConfig(6, 0))
    b = estimate_sup_moment(u0, cfg, EnsembleConfig(6, 0))
    diff, se = compare_moments(a, b)
    assert diff == 0.0
    assert se == pytest.approx(math.sqrt(2) * a.sup_moment_se)
    assert a.to_dict()["n_paths"] == 6


def test_timestep_convergence_for_additive_linear_noise():
    cfg = ou_cfg(K=2, t_end=0.5)
    u0 = random_field(2, np.random.default_rng(7))
    rep = timestep_convergence(u0, cfg, [0.05, 0.025, 0.0125, 0.00625], EnsembleConfig(16))
    assert np.all(np.diff(rep.errors) < 0)
    assert rep.order > 0.7
    with pytest.raises(ValueError):
        timestep_convergence(u0, cfg, [0.05, 0.03], EnsembleConfig(2))
    with pytest.raises(ValueError):
        timestep_convergence(u0, cfg, [0.05], EnsembleConfig(2))


def test_constant_observable_expectation():
    est = transition_expectation(constant_observable(1.0), 0.02, random_field(3, np.random.default_rng(0)),
                                 nonlinear_cfg(K=3), EnsembleConfig(3))
    assert est.mean == 1.0 and est.se == 0.0
