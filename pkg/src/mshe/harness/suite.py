"""The bundled validation experiments, runnable at full or smoke scale.

Each ``check_*`` returns a JSON-ready dict of measured quantities plus a
``passed`` flag evaluated at the stated tolerance.  Smoke scale shrinks
ensembles and horizons; its pass flags are not meaningful, only its
determinism is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..dynamics import LINEAR_ONLY, CutoffConfig, drift_abstract, drift_raw
from ..estimators import (
    Coupling,
    EnsembleConfig,
    compare_moments,
    cutoff_coincidence,
    estimate_sup_moment,
    feller_probe,
    stop_probability_sweep,
    timestep_convergence,
)
from ..integrator import SimulationConfig, run_trajectory
from ..invariant import (
    kb_average,
    mode_amplitude_sq,
    saturated_mode,
    sobolev_moment_under_nu,
    sobolev_sq_observable,
    spectral_decay_profile,
    tightness_mass,
)
from ..noise import AdditiveDiagonal, ScalarMultiplicative
from ..spectral import (
    ModelParams,
    RealBasis,
    SpectralField,
    SpectralGrid,
    apply_fractional_power,
    random_field,
    sobolev_norm,
    to_physical,
    to_spectral,
    physical_l2_norm,
)


@dataclass(frozen=True)
class Scale:
    name: str
    full: bool

    def pick(self, full, smoke):
        return full if self.full else smoke


FULL = Scale("full", True)
SMOKE = Scale("smoke", False)


def scale_of(name: str) -> Scale:
    return {"full": FULL, "smoke": SMOKE}[name]


# default nonlinear run: pattern-forming, |b| < 4, additive noise on the two lowest shells
DEFAULT_K = 16
DEFAULT_PARAMS = ModelParams(0.5, 3.5)
DEFAULT_NOISE = {1: 0.5, 2: 0.5}


def default_config(K: int = DEFAULT_K, **kw) -> SimulationConfig:
    base = dict(grid=SpectralGrid(K), params=DEFAULT_PARAMS,
                diffusion=AdditiveDiagonal.on_shells(DEFAULT_NOISE))
    base.update(kw)
    return SimulationConfig(**base)


def default_initial(K: int = DEFAULT_K) -> SpectralField:
    return random_field(K, np.random.default_rng(0), amplitude=0.5, decay=4.0)


def check_drift_equivalence(scale: Scale = FULL, seed: int = 1) -> dict:
    K = 16
    grid = SpectralGrid(K)
    rng = np.random.default_rng(seed)
    params = ModelParams(0.5, 3.5)
    worst = 0.0
    n = scale.pick(1000, 20)
    for _ in range(n):
        u = random_field(K, rng, amplitude=rng.uniform(0.1, 2.0), decay=rng.uniform(1.0, 3.0))
        d = np.abs(drift_abstract(u, params, grid).coeffs - drift_raw(u, params, grid).coeffs).max()
        worst = max(worst, float(d))
    return {"fields": n, "max_abs_difference": worst, "passed": worst <= 1e-12}


def check_spectral_identities(scale: Scale = FULL, seed: int = 2) -> dict:
    K = 16
    grid = SpectralGrid(K)
    rng = np.random.default_rng(seed)
    parseval = sob = half = 0.0
    for _ in range(scale.pick(50, 5)):
        u = random_field(K, rng, amplitude=1.0, decay=2.0)
        f = to_physical(u, grid)
        back = to_spectral(f, grid)
        parseval = max(parseval, abs(physical_l2_norm(f) - u.norm()) / u.norm(),
                       (back - u).norm() / u.norm())
        for m in (0.5, 1, 2):
            a = sobolev_norm(u, 2 * m)
            b = apply_fractional_power(u, m).norm()
            sob = max(sob, abs(a - b) / a)
        h = apply_fractional_power(apply_fractional_power(u, 0.5), 0.5)
        A = apply_fractional_power(u, 1.0)
        half = max(half, float(np.abs(h.coeffs - A.coeffs).max() / np.abs(A.coeffs).max()))
    return {"parseval_rel": parseval, "sobolev_rel": sob, "sqrt_compose_rel": half,
            "passed": parseval <= 1e-10 and sob <= 1e-12 and half <= 1e-12}


def check_bernoulli(scale: Scale = FULL) -> dict:
    dt = 1e-4
    cfg = SimulationConfig(SpectralGrid(2), ModelParams(1.0, 0.0), AdditiveDiagonal(()), dt=dt, t_end=1.0)
    rec = run_trajectory(SpectralField.constant(2, 1.0), cfg)
    c = float(rec.final.coeffs[2, 2].real)
    exact = 1.0 / math.sqrt(2.0 * math.exp(2.0) - 1.0)
    rel = abs(c - exact) / exact
    return {"dt": dt, "c_numeric": c, "c_exact": exact, "relative_error": rel, "passed": rel <= 1e-4}


OU_SHELLS = {1: 0.5, 2: 0.7, 4: 1.0}
OU_A = 2.0


def ou_symbol(lam: float, a: float = OU_A) -> float:
    return lam * lam - 2.0 * lam + a


def check_ou_invariant(scale: Scale = FULL, seed: int = 3) -> dict:
    K = 2
    cfg = SimulationConfig(SpectralGrid(K), ModelParams(OU_A, 0.0), AdditiveDiagonal.on_shells(OU_SHELLS),
                           toggles=LINEAR_ONLY, dt=5e-4, t_end=1.0)
    basis = RealBasis(K, 4)
    slots = [j for j in range(len(basis)) if basis.eigenvalues[j] in OU_SHELLS]
    obs = [mode_amplitude_sq(int(basis.k[j]), int(basis.l[j]), "cos" if basis.kind[j] == 1 else "sin")
           for j in slots]
    T_avg = scale.pick(200.0, 10.0)
    meas = kb_average(SpectralField.zeros(K), cfg, T_avg, obs, stride=20, seed=seed)
    rows = []
    for j, o in zip(slots, obs):
        lam = float(basis.eigenvalues[j])
        rows.append({"observable": o.name, "shell": lam, "mean": meas.average(o.name),
                     "se": meas.stderr(o.name), "sigma": OU_SHELLS[int(lam)]})
    prof = spectral_decay_profile(meas)
    shells = []
    for s, e, se, mult in zip(prof.shells, prof.energy, prof.se, prof.multiplicity):
        if int(s) in OU_SHELLS:
            shells.append({"shell": float(s), "energy": float(e), "se": float(se), "multiplicity": int(mult)})
    ok = all(abs(r["mean"] - r["sigma"] ** 2 / (2 * ou_symbol(r["shell"]))) <= 3 * r["se"] for r in rows)
    ok &= all(abs(s["energy"] - s["multiplicity"] * OU_SHELLS[int(s["shell"])] ** 2
                  / (2 * ou_symbol(s["shell"]))) <= 3 * s["se"] for s in shells)
    return {"T_avg": T_avg, "samples": meas.n_samples, "modes": rows, "shells": shells, "passed": bool(ok)}


def check_strong_order(scale: Scale = FULL, mapper: Callable = map) -> dict:
    K = 8
    cfg = SimulationConfig(SpectralGrid(K), DEFAULT_PARAMS, ScalarMultiplicative(0.2),
                           cutoff=CutoffConfig(50.0), t_end=1.0, dt=2.0**-6)
    dts = scale.pick([2.0**-k for k in range(6, 11)], [2.0**-k for k in range(4, 7)])
    ens = EnsembleConfig(scale.pick(64, 4), base_seed=5, chunk_size=16)
    rep = timestep_convergence(default_initial(K), cfg, dts, ens, mapper)
    return {"dts": rep.dts, "errors": rep.errors, "order": rep.order, "passed": rep.order >= 0.4}


def check_cutoff_coincidence(scale: Scale = FULL) -> dict:
    cfg = default_config(dt=2e-3, t_end=scale.pick(2.0, 0.1))
    rows = cutoff_coincidence(default_initial(), 5.0, 10.0, cfg, EnsembleConfig(scale.pick(32, 2), base_seed=6))
    before = max(r.max_diff_before for r in rows)
    crossed = sum(r.zeta is not None for r in rows)
    return {"paths": len(rows), "crossed": crossed,
            "zeta": [r.zeta for r in rows],
            "max_diff_before": [r.max_diff_before for r in rows],
            "max_diff_after": [r.max_diff_after for r in rows],
            "passed": before == 0.0}


def check_n_independence(scale: Scale = FULL, mapper: Callable = map) -> dict:
    N = 8.0
    cfg = default_config(dt=2e-3, t_end=scale.pick(5.0, 0.1))
    ens = EnsembleConfig(scale.pick(256, 4), base_seed=7, coupling=Coupling.INDEPENDENT, chunk_size=16)
    u0 = default_initial()
    reps = []
    for i, n in enumerate((N, 2 * N)):
        e = EnsembleConfig(ens.n_paths, ens.seed_for(i), chunk_size=ens.chunk_size)
        reps.append(estimate_sup_moment(u0, cfg.replace(cutoff=CutoffConfig(n)), e, m=1, p=2.0,
                                        T=cfg.t_end, mapper=mapper))
    diff, pooled = compare_moments(*reps)
    blow = sum(r.n_blowups for r in reps)
    return {"N": [N, 2 * N], "reports": [r.to_dict() for r in reps], "difference": diff,
            "pooled_se": pooled, "blowups": blow, "passed": diff <= 2 * pooled and blow == 0}


def check_stop_envelope(scale: Scale = FULL, mapper: Callable = map) -> dict:
    r0 = 20.0
    t = scale.pick(5.0, 0.1)
    cfg = default_config(dt=2e-3, t_end=t)
    rs = [r0 * k for k in (1, 2, 4, 8)]
    ens = EnsembleConfig(scale.pick(128, 4), base_seed=8, chunk_size=16)
    rows = stop_probability_sweep(default_initial(), cfg, ens, "xi", rs, t, m=1, mapper=mapper)
    mono = all(b.estimate <= a.ci_high for a, b in zip(rows, rows[1:]))
    below = all(r.estimate <= r.envelope for r in rows)
    return {"rows": [r.to_dict() for r in rows], "monotone": mono, "below_envelope": below,
            "passed": mono and below}


def check_feller(scale: Scale = FULL, mapper: Callable = map) -> dict:
    m = 1
    cfg = default_config(t_end=1.0)
    u10 = default_initial()
    d = random_field(DEFAULT_K, np.random.default_rng(11), amplitude=1.0, decay=4.0)
    h = 0.4
    u20 = u10 + d * (h / sobolev_norm(d, 2 * m))
    ens = EnsembleConfig(scale.pick(64, 2), base_seed=9, chunk_size=16)
    rep = feller_probe(u10, u20, saturated_mode(1, 0, "cos"), scale.pick(1.0, 0.05), cfg, ens,
                       levels=4, m=m, mapper=mapper)
    return {"rows": rep.to_rows(), "intercept": rep.intercept, "intercept_se": rep.intercept_se,
            "model_error": rep.model_error, "intercept_uncertainty": rep.intercept_uncertainty,
            "monotone": rep.monotone,
            "passed": rep.monotone and rep.intercept_consistent_with_zero}


def check_regularity(scale: Scale = FULL) -> dict:
    m = 1
    alpha = 2.0 * (m + 1)
    cfg = default_config()
    T1 = scale.pick(50.0, 0.5)
    out = {}
    for label, T in (("T", T1), ("2T", 2 * T1)):
        meas = kb_average(default_initial(), cfg, T, [sobolev_sq_observable(alpha)],
                          stride=scale.pick(10, 1), seed=10)
        est = sobolev_moment_under_nu(meas, alpha)
        r = np.sqrt(sobolev_sq_observable(alpha).batch(meas.reservoir))
        R99 = float(np.quantile(r, 0.99, method="inverted_cdf"))
        out[label] = {"T_avg": T, "estimate": est.estimate, "se": est.se, "ceiling": est.alpha_ceiling,
                      "above_ceiling": est.above_ceiling, "R99": R99,
                      "mass_R99": tightness_mass(meas, R99, alpha), "blowup": meas.blowup}
    a, b = out["T"]["estimate"], out["2T"]["estimate"]
    change = abs(b - a) / abs(a)
    tight = out["2T"]["mass_R99"] >= 0.99 and math.isfinite(out["2T"]["R99"])
    return {"alpha": alpha, "runs": out, "relative_change": change,
            "passed": math.isfinite(a) and math.isfinite(b) and change < 0.10 and tight}


CHECKS = {
    "c01_drift_equivalence": lambda s, mp: check_drift_equivalence(s),
    "c02_spectral_identities": lambda s, mp: check_spectral_identities(s),
    "c03_bernoulli": lambda s, mp: check_bernoulli(s),
    "c04_ou_invariant": lambda s, mp: check_ou_invariant(s),
    "c05_strong_order": lambda s, mp: check_strong_order(s, mp),
    "c06_cutoff_coincidence": lambda s, mp: check_cutoff_coincidence(s),
    "c07_n_independence": lambda s, mp: check_n_independence(s, mp),
    "c08_stop_envelope": lambda s, mp: check_stop_envelope(s, mp),
    "c09_feller": lambda s, mp: check_feller(s, mp),
    "c10_regularity": lambda s, mp: check_regularity(s),
}
