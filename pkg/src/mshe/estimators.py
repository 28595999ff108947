"""Monte Carlo estimators over path ensembles.

Per-path statistics are computed first and then reduced in path-index order,
so an estimate depends only on (config, seeds) and not on how paths were
distributed over workers.  Coupled comparisons reuse the same
(base_seed, path_index) noise streams in every compared system.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binomtest

from .dynamics import CutoffConfig
from .integrator import (
    SimulationConfig,
    StopThresholds,
    TrajectoryRecord,
    run_ensemble,
    simulate,
)
from .invariant import Observable
from .spectral import L2_WEIGHT, SpectralField, sobolev_norm


class Coupling(str, Enum):
    INDEPENDENT = "independent"
    COUPLED = "coupled"


@dataclass(frozen=True)
class EnsembleConfig:
    n_paths: int
    base_seed: int = 0
    coupling: Coupling = Coupling.COUPLED
    chunk_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "coupling", Coupling(self.coupling))
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")

    def seed_for(self, system: int) -> int:
        """Noise seed of the ``system``-th compared run."""
        if self.coupling is Coupling.COUPLED or system == 0:
            return self.base_seed
        return int(np.random.SeedSequence([self.base_seed, system]).generate_state(1, np.uint64)[0] >> 1)


def _mean_se(x: np.ndarray) -> tuple[float, float | None]:
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return math.nan, None
    if len(x) < 2:
        return float(x.mean()), None
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


# -- moments -------------------------------------------------------------------

def _window(rec: TrajectoryRecord, T: float, strict: bool = False) -> np.ndarray:
    eps = 1e-9 * max(1.0, T)
    return rec.times < T - eps if strict else rec.times <= T + eps


def path_sup_moment(rec: TrajectoryRecord, m: int, p: float, T: float) -> float:
    """max over grid times in [0, T] of ||A^m u||^p."""
    w = _window(rec, T)
    return float(np.max(rec.norm(2.0 * m)[w] ** p))


def path_dissipation(rec: TrajectoryRecord, m: int, p: float, T: float) -> float:
    """Trapezoidal integral over [0, T] of ||A^m u||^(p-2) ||A^(m+1) u||^2."""
    w = _window(rec, T)
    y = rec.norm(2.0 * m)[w] ** (p - 2) * rec.norm(2.0 * m + 2)[w] ** 2
    return float(np.trapezoid(y, rec.times[w])) if len(y) > 1 else 0.0


@dataclass
class MomentReport:
    sup_moment: float
    sup_moment_se: float | None
    dissipation: float
    dissipation_se: float | None
    n_paths: int
    n_blowups: int
    m: int
    p: float
    T: float
    N: float | None
    global_regime: bool
    per_path_sup: np.ndarray = field(repr=False)
    per_path_dissipation: np.ndarray = field(repr=False)

    @property
    def conditional(self) -> bool:
        """Estimate is over surviving paths only."""
        return self.n_blowups > 0

    @property
    def anomalous(self) -> bool:
        """Blowups where global existence is expected."""
        return self.n_blowups > 0 and self.global_regime

    def to_dict(self) -> dict:
        return {
            "sup_moment": self.sup_moment, "sup_moment_se": self.sup_moment_se,
            "dissipation": self.dissipation, "dissipation_se": self.dissipation_se,
            "n_paths": self.n_paths, "n_blowups": self.n_blowups,
            "m": self.m, "p": self.p, "T": self.T, "N": self.N,
            "conditional": self.conditional, "anomalous": self.anomalous,
        }


def moments_from_records(recs: Sequence[TrajectoryRecord], cfg: SimulationConfig,
                         m: int, p: float, T: float) -> MomentReport:
    ok = [r for r in recs if not r.blew_up]
    sups = np.array([path_sup_moment(r, m, p, T) for r in ok])
    diss = np.array([path_dissipation(r, m, p, T) for r in ok])
    s, s_se = _mean_se(sups)
    d, d_se = _mean_se(diss)
    return MomentReport(s, s_se, d, d_se, len(recs), len(recs) - len(ok), m, p, T,
                        None if cfg.cutoff is None else cfg.cutoff.N,
                        cfg.params.global_regime, sups, diss)


def estimate_sup_moment(u0: SpectralField, cfg: SimulationConfig, ens: EnsembleConfig,
                        m: int = 1, p: float = 2.0, T: float | None = None,
                        mapper: Callable = map) -> MomentReport:
    """E sup_[0,T] ||A^m u||^p and E int_0^T ||A^m u||^(p-2) ||A^(m+1) u||^2 ds."""
    if p < 2:
        raise ValueError("p must be >= 2")
    T = cfg.t_end if T is None else T
    run = cfg.replace(m=m, t_end=T)
    recs = run_ensemble(u0, run, ens.n_paths, ens.base_seed, ens.chunk_size, mapper)
    return moments_from_records(recs, run, m, p, T)


def compare_moments(a: MomentReport, b: MomentReport) -> tuple[float, float]:
    """(|difference| of sup estimates, pooled standard error) for independent ensembles."""
    pooled = math.sqrt((a.sup_moment_se or 0.0) ** 2 + (b.sup_moment_se or 0.0) ** 2)
    return abs(a.sup_moment - b.sup_moment), pooled


# -- stopping probabilities ----------------------------------------------------

STOP_KINDS = ("xi", "eta", "rho")


@dataclass
class StopProbability:
    kind: str
    r: float
    t: float
    estimate: float
    ci_low: float
    ci_high: float
    hits: int
    n: int
    envelope: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _stop_time(rec: TrajectoryRecord, kind: str, m: int, r: float) -> float | None:
    if kind == "xi":
        return rec.stops.xi[(m, float(r))]
    if kind == "eta":
        return rec.stops.eta[(m, float(r))]
    return rec.stops.rho_N


def _envelope_bracket(rec: TrajectoryRecord, kind: str, m: int, t: float) -> float:
    """sup over grid times s < t of the quantity whose exceedance defines the stop."""
    w = _window(rec, t, strict=True)
    if not w.any():
        return 0.0
    if kind == "xi":
        return float(np.max(rec.norm(2.0 * m)[w] ** 2))
    if kind == "eta":
        return float(np.max(rec.times[w] * rec.norm(2.0 * m + 2)[w] ** 2))
    return float(np.max(rec.norm(2.0)[w]))


def stop_probability_sweep(u0: SpectralField, cfg: SimulationConfig, ens: EnsembleConfig,
                           kind: str, rs: Sequence[float], t: float, m: int = 1,
                           mapper: Callable = map, confidence: float = 0.95) -> list[StopProbability]:
    """P(stop < t) for each threshold r from one ensemble, with Wilson intervals.

    ``envelope`` is the ensemble mean of the pre-t supremum divided by r, a
    Markov-type upper bound (for ``rho`` the threshold applies to ||u||_2).
    """
    if kind not in STOP_KINDS:
        raise ValueError(f"kind must be one of {STOP_KINDS}")
    if any(not r > 0 for r in rs):
        raise ValueError("thresholds must be positive")
    if kind == "rho" and len(rs) != 1:
        raise ValueError("rho uses a single threshold N per run")
    th = {"xi": StopThresholds(xi=tuple((m, r) for r in rs)),
          "eta": StopThresholds(eta=tuple((m, r) for r in rs)),
          "rho": StopThresholds(rho_N=rs[0])}[kind]
    run = cfg.replace(thresholds=th, m=m, t_end=max(t, cfg.dt))
    recs = run_ensemble(u0, run, ens.n_paths, ens.base_seed, ens.chunk_size, mapper)
    return stop_probabilities_from_records(recs, kind, rs, t, m, confidence)


def stop_probabilities_from_records(recs: Sequence[TrajectoryRecord], kind: str, rs: Sequence[float],
                                    t: float, m: int = 1, confidence: float = 0.95) -> list[StopProbability]:
    n = len(recs)
    bracket = float(np.mean([_envelope_bracket(rec, kind, m, t) for rec in recs]))
    out = []
    for r in rs:
        hits = 0
        for rec in recs:
            s = _stop_time(rec, kind, m, r)
            hits += s is not None and s < t
        ci = binomtest(hits, n).proportion_ci(confidence, method="wilson")
        out.append(StopProbability(kind, float(r), t, hits / n, float(ci.low), float(ci.high),
                                   hits, n, bracket / r))
    return out


def estimate_stop_probability(u0: SpectralField, cfg: SimulationConfig, ens: EnsembleConfig,
                              kind: str, r: float, t: float, m: int = 1,
                              mapper: Callable = map) -> StopProbability:
    return stop_probability_sweep(u0, cfg, ens, kind, [r], t, m, mapper)[0]


# -- semigroup probes ----------------------------------------------------------

@dataclass
class Expectation:
    mean: float
    se: float | None
    n_paths: int
    n_blowups: int
    valid: bool
    values: np.ndarray = field(repr=False)


def transition_expectation(obs: Observable, t: float, u0: SpectralField, cfg: SimulationConfig,
                           ens: EnsembleConfig, mapper: Callable = map) -> Expectation:
    """Monte Carlo P_t obs(u0) = E obs(u(t; u0)).

    Blown-up paths are dropped; the result is marked invalid if any occurred
    and the observable is unbounded.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        v = obs(u0)
        return Expectation(v, 0.0, ens.n_paths, 0, True, np.full(ens.n_paths, v))
    recs = run_ensemble(u0, cfg.replace(t_end=t), ens.n_paths, ens.base_seed, ens.chunk_size, mapper)
    return _expectation(obs, recs)


def _expectation(obs: Observable, recs: Sequence[TrajectoryRecord]) -> Expectation:
    ok = [r for r in recs if not r.blew_up]
    vals = obs.batch(np.array([r.final.coeffs for r in ok])) if ok else np.zeros(0)
    mean, se = _mean_se(vals)
    nb = len(recs) - len(ok)
    return Expectation(mean, se, len(recs), nb, nb == 0 or obs.bounded, np.asarray(vals, dtype=float))


@dataclass
class FellerRow:
    h: float
    difference: float
    se: float | None
    mean_abs_difference: float


@dataclass
class FellerReport:
    rows: list[FellerRow]
    intercept: float
    intercept_se: float | None
    monotone: bool
    model_error: float = 0.0

    @property
    def intercept_uncertainty(self) -> float | None:
        """Path-sampling SE and extrapolation model error combined in quadrature."""
        if self.intercept_se is None:
            return None
        return math.hypot(self.intercept_se, self.model_error)

    @property
    def intercept_consistent_with_zero(self) -> bool:
        u = self.intercept_uncertainty
        if u is None:
            return self.intercept == 0.0
        return abs(self.intercept) <= 1.96 * u

    def to_rows(self) -> list[dict]:
        return [r.__dict__ for r in self.rows]


def feller_probe(u10: SpectralField, u20: SpectralField, obs: Observable, t: float,
                 cfg: SimulationConfig, ens: EnsembleConfig, levels: int = 4,
                 m: int | None = None, mapper: Callable = map) -> FellerReport:
    """|P_t obs(u10) - P_t obs(u20_s)| along u20_s = u10 + s (u20 - u10), s = 1, 1/2, ...

    All starts share the same noise paths, so each path's difference is a
    smooth function of h.  The intercept extrapolates it to h = 0 with a
    per-path polynomial of degree min(3, levels - 1), averaged over paths;
    its SE covers path sampling and ``model_error`` (the shift from the
    next lower degree) covers truncation of the polynomial.
    """
    if ens.coupling is not Coupling.COUPLED:
        raise ValueError("feller_probe requires coupled noise")
    m = cfg.m if m is None else m
    run = cfg.replace(t_end=t)
    base = run_ensemble(u10, run, ens.n_paths, ens.base_seed, ens.chunk_size, mapper)
    v0 = _expectation(obs, base).values
    diff = u20 - u10
    hs, D = [], []
    for i in range(levels):
        s = 0.5**i
        start = u10 + diff * s
        hs.append(sobolev_norm(start - u10, 2.0 * m))
        recs = run_ensemble(start, run, ens.n_paths, ens.base_seed, ens.chunk_size, mapper)
        D.append(v0 - _expectation(obs, recs).values)
    D = np.array(D)
    hs = np.array(hs)
    rows = []
    for h, d in zip(hs, D):
        mean, se = _mean_se(d)
        rows.append(FellerRow(float(h), abs(mean), se, float(np.mean(np.abs(d)))))
    diffs = [r.difference for r in rows]
    monotone = all(a >= b for a, b in zip(diffs, diffs[1:]))
    if np.all(D == 0):
        return FellerReport(rows, 0.0, 0.0, monotone)
    deg = min(3, levels - 1)
    b0, b0_se = _mean_se(_path_intercepts(hs, D, deg))
    model = abs(b0 - float(np.mean(_path_intercepts(hs, D, deg - 1)))) if deg >= 2 else 0.0
    return FellerReport(rows, b0, b0_se, monotone, model)


def _path_intercepts(hs: np.ndarray, D: np.ndarray, deg: int) -> np.ndarray:
    """Value at h = 0 of a per-path least-squares polynomial in h; D has shape (levels, paths)."""
    return np.linalg.lstsq(np.vander(hs, deg + 1), D, rcond=None)[0][-1]


# -- convergence and coincidence -------------------------------------------------

def _sobolev_rows(d: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.sqrt(((d.real**2 + d.imag**2) * w).sum(axis=(-2, -1)))


@dataclass
class GalerkinRow:
    shell_cutoff: float
    error: float
    se: float | None
    max_error: float


def galerkin_convergence(u0: SpectralField, shell_ladder: Sequence[float], cfg: SimulationConfig,
                         ens: EnsembleConfig, m: int | None = None) -> list[GalerkinRow]:
    """sup_[0,T] ||u^(L_i) - u^(L_max)||_(2m) per level, coupled on shared per-mode noise."""
    ladder = sorted(float(x) for x in shell_ladder)
    if ladder[-1] > cfg.grid.K**2 * 2:
        raise ValueError("finest shell cutoff exceeds the coefficient box")
    m = cfg.m if m is None else m
    cfgs = [cfg.replace(shell_cutoff=L) for L in ladder]
    w = L2_WEIGHT * cfg.grid.A ** (2.0 * m)
    P = ens.n_paths
    sup = np.zeros((len(ladder), P))

    def observe(n, t, states, alive):
        ref = states[-1]
        for i in range(len(ladder)):
            e = _sobolev_rows(states[i] - ref, w)
            sup[i] = np.maximum(sup[i], e)

    simulate(u0, cfgs, range(P), ens.base_seed, observer=observe, record=False)
    rows = []
    for i, L in enumerate(ladder):
        mean, se = _mean_se(sup[i])
        rows.append(GalerkinRow(L, mean, se, float(sup[i].max())))
    return rows


@dataclass
class CoincidenceRow:
    path_index: int
    zeta: float | None
    max_diff_before: float
    max_diff_after: float


def cutoff_coincidence(u0: SpectralField, N1: float, N2: float, cfg: SimulationConfig,
                       ens: EnsembleConfig) -> list[CoincidenceRow]:
    """Paired runs at cut-offs N1 < N2 on identical noise.

    zeta is the first grid time at which either path has ||u||_2 > N1.  The
    coefficientwise difference is tracked separately on [0, zeta] and after.
    """
    if not N1 < N2:
        raise ValueError("need N1 < N2")
    cfgs = [cfg.replace(cutoff=CutoffConfig(N1)), cfg.replace(cutoff=CutoffConfig(N2))]
    P = ens.n_paths
    zeta = np.full(P, np.nan)
    before = np.zeros(P)
    after = np.zeros(P)
    w2 = L2_WEIGHT * cfg.grid.A**2

    def observe(n, t, states, alive):
        a, b = states
        h = np.maximum(_sobolev_rows(a, w2), _sobolev_rows(b, w2))
        d = np.abs(a - b).max(axis=(-2, -1))
        crossing = np.isnan(zeta) & (h > N1)
        zeta[crossing] = t
        pre = np.isnan(zeta) | crossing
        before[pre] = np.maximum(before[pre], d[pre])
        after[~pre] = np.maximum(after[~pre], d[~pre])

    simulate(u0, cfgs, range(P), ens.base_seed, observer=observe, record=False)
    return [CoincidenceRow(p, None if np.isnan(zeta[p]) else float(zeta[p]),
                           float(before[p]), float(after[p])) for p in range(P)]


@dataclass
class TimestepReport:
    dts: np.ndarray
    errors: np.ndarray
    order: float


def timestep_convergence(u0: SpectralField, cfg: SimulationConfig, dts: Sequence[float],
                         ens: EnsembleConfig, mapper: Callable = map) -> TimestepReport:
    """Endpoint RMS L2 difference between the dt and dt/2 solutions on one Brownian path.

    ``dts`` must be successive halvings.  The finest step fixes the noise: a
    run at dt sums dt / dt_min fine increments per step.  ``order`` is the
    least-squares slope of log error against log dt.
    """
    dts = sorted((float(x) for x in dts), reverse=True)
    if len(dts) < 2:
        raise ValueError("need at least two step sizes")
    fine = dts[-1]
    for a, b in zip(dts, dts[1:]):
        if abs(a / b - 2.0) > 1e-12:
            raise ValueError("step sizes must be successive halvings")
    finals = []
    for dt in dts:
        R = int(round(dt / fine))
        run = cfg.replace(dt=dt, noise_refinement=R)
        recs = run_ensemble(u0, run, ens.n_paths, ens.base_seed, ens.chunk_size, mapper)
        if any(r.blew_up for r in recs):
            raise FloatingPointError(f"blowup at dt={dt}")
        finals.append(np.array([r.final.coeffs for r in recs]))
    errors = []
    for a, b in zip(finals, finals[1:]):
        d = a - b
        e2 = L2_WEIGHT * (d.real**2 + d.imag**2).sum(axis=(-2, -1))
        errors.append(math.sqrt(float(np.mean(e2))))
    errors = np.array(errors)
    coarse = np.array(dts[:-1])
    order = math.nan
    if len(errors) >= 2 and np.all(errors > 0):
        order = float(np.polyfit(np.log(coarse), np.log(errors), 1)[0])
    return TimestepReport(coarse, errors, order)
