"""Subcommand bodies: run one experiment kind and write its outputs through a sink.

Each runner returns a dict of anomaly flags for the manifest.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..estimators import (
    EnsembleConfig,
    estimate_sup_moment,
    feller_probe,
    galerkin_convergence,
    stop_probability_sweep,
    timestep_convergence,
)
from ..integrator import run_trajectory
from ..invariant import (
    kb_average,
    measure_header,
    moment_under_nu,
    parse_observable,
    resolution_ceiling,
    sobolev_moment_under_nu,
    spectral_decay_profile,
    tightness_mass,
)
from ..spectral import random_field, sobolev_norm
from .config import RunConfig
from .io import OutputSink
from .suite import CHECKS, scale_of


def _ensemble(cfg: RunConfig) -> EnsembleConfig:
    e = cfg.ensemble
    return EnsembleConfig(e.n_paths, e.base_seed, e.coupling, e.chunk_size)


def run_simulate(cfg: RunConfig, sink: OutputSink, mapper: Callable = map) -> dict:
    p = cfg.experiment
    sim = cfg.simulation(m=p.m).replace(snapshot_stride=p.snapshot_stride)
    rec = run_trajectory(cfg.initial_field(), sim, cfg.ensemble.base_seed, p.path_index)
    orders = sorted(rec.norms)
    sink.write_csv("norms.csv", ["t"] + [f"norm_{a:g}" for a in orders],
                   ([t] + [rec.norms[a][i] for a in orders] for i, t in enumerate(rec.times)))
    raw = sink.write_raw("snapshots", rec.snapshots)
    sink.write_json("trajectory.json", {
        "base_seed": rec.base_seed, "path_index": rec.path_index, "m": p.m,
        "stops": rec.stops.to_dict(), "steps": len(rec.times) - 1,
        "min_cutoff_factor": rec.min_cutoff_factor,
        "snapshots": {"file": raw.name, "dtype": "<c16", "shape": [sim.grid.n, sim.grid.n],
                      "times": rec.snapshot_times},
    })
    return {"blowups": int(rec.blew_up)}


def run_ensemble_moments(cfg: RunConfig, sink: OutputSink, mapper: Callable = map) -> dict:
    p = cfg.experiment
    sim = cfg.simulation(m=p.m)
    rep = estimate_sup_moment(cfg.initial_field(), sim, _ensemble(cfg), p.m, p.p, p.T, mapper)
    sink.write_json("moments.json", rep.to_dict())
    sink.write_csv("moments_per_path.csv", ["path", "sup_moment", "dissipation"],
                   ([i, s, d] for i, (s, d) in enumerate(zip(rep.per_path_sup, rep.per_path_dissipation))))
    return {"blowups": rep.n_blowups, "anomalous": rep.anomalous}


def run_invariant(cfg: RunConfig, sink: OutputSink, mapper: Callable = map) -> dict:
    p = cfg.experiment
    sim = cfg.simulation(m=p.m)
    obs = [parse_observable(t) for t in p.observables]
    meas = kb_average(cfg.initial_field(), sim, p.T_avg, obs, p.burn_in, p.stride,
                      cfg.ensemble.base_seed, 0, p.capacity)
    raw = sink.write_raw("reservoir", meas.reservoir.astype(complex))
    header = measure_header(meas, raw.name)
    ceiling = resolution_ceiling(meas) if len(meas.reservoir) else math.inf
    moments = {f"{q:g}": moment_under_nu(meas, q).__dict__ for q in p.moments_q} if len(meas.reservoir) else {}
    sob = {}
    for a in (0.0, 2.0 * p.m, 2.0 * p.m + 2):
        e = sobolev_moment_under_nu(meas, a)
        sob[f"{a:g}"] = {"estimate": e.estimate, "se": e.se, "above_ceiling": e.above_ceiling}
    tight = {f"{R:g}": tightness_mass(meas, R, 2.0 * p.m + 2) for R in p.radii}
    header.update({"moments": moments, "sobolev_moments": sob, "tightness": tight,
                   "resolution_ceiling": ceiling if math.isfinite(ceiling) else None})
    sink.write_json("measure.json", header)
    prof = spectral_decay_profile(meas)
    sink.write_csv("spectrum.csv", ["shell", "multiplicity", "energy", "se"],
                   zip(prof.shells.tolist(), prof.multiplicity.tolist(), prof.energy, prof.se))
    return {"blowups": int(meas.blowup), "resolution_ceiling_hit": bool(2.0 * p.m + 2 > ceiling)}


def run_feller(cfg: RunConfig, sink: OutputSink, mapper: Callable = map) -> dict:
    p = cfg.experiment
    sim = cfg.simulation(m=p.m)
    u10 = cfg.initial_field()
    d = random_field(cfg.grid.K, np.random.default_rng(p.direction_seed), amplitude=1.0, decay=4.0)
    u20 = u10 + d * (p.h / sobolev_norm(d, 2.0 * p.m))
    ens = _ensemble(cfg)
    if ens.coupling.value != "coupled":
        raise ValueError("feller requires ensemble.coupling = coupled")
    rep = feller_probe(u10, u20, parse_observable(p.observable), p.t, sim, ens, p.levels, p.m, mapper)
    sink.write_csv("feller.csv", ["h", "difference", "se", "mean_abs_difference"],
                   ([r.h, r.difference, r.se, r.mean_abs_difference] for r in rep.rows))
    sink.write_json("feller.json", {"intercept": rep.intercept, "intercept_se": rep.intercept_se,
                                    "model_error": rep.model_error,
                                    "monotone": rep.monotone,
                                    "intercept_consistent_with_zero": rep.intercept_consistent_with_zero})
    return {"non_monotone": not rep.monotone}


def run_convergence(cfg: RunConfig, sink: OutputSink, mapper: Callable = map) -> dict:
    p = cfg.experiment
    sim = cfg.simulation(m=p.m)
    u0 = cfg.initial_field()
    rows = galerkin_convergence(u0, p.shell_ladder, sim, _ensemble(cfg), p.m)
    sink.write_csv("galerkin.csv", ["shell_cutoff", "sup_error", "se", "max_error"],
                   ([r.shell_cutoff, r.error, r.se, r.max_error] for r in rows))
    if len(p.dts) >= 2:
        rep = timestep_convergence(u0, sim, p.dts, _ensemble(cfg), mapper)
        sink.write_csv("timestep.csv", ["dt", "rms_error"], zip(rep.dts, rep.errors))
        sink.write_json("timestep.json", {"order": rep.order})
    return {}


def run_stopprob(cfg: RunConfig, sink: OutputSink, mapper: Callable = map) -> dict:
    p = cfg.experiment
    sim = cfg.simulation(m=p.m)
    rs = [p.r0 * k for k in p.multiples]
    rows = stop_probability_sweep(cfg.initial_field(), sim, _ensemble(cfg), p.stop_kind, rs, p.t, p.m, mapper)
    sink.write_csv("stopprob.csv", ["r", "t", "estimate", "ci_low", "ci_high", "hits", "n", "envelope"],
                   ([r.r, r.t, r.estimate, r.ci_low, r.ci_high, r.hits, r.n, r.envelope] for r in rows))
    return {}


def run_paper_suite(cfg: RunConfig, sink: OutputSink, mapper: Callable = map) -> dict:
    scale = scale_of(cfg.experiment.scale)
    failed = []
    for name, check in CHECKS.items():
        res = check(scale, mapper)
        sink.write_json(f"{name}.json", {"scale": scale.name, **res})
        if not res["passed"]:
            failed.append(name)
    sink.write_json("suite_summary.json", {"scale": scale.name, "checks": list(CHECKS), "failed": failed})
    return {"failed_checks": failed} if scale.full else {}


RUNNERS = {
    "simulate": run_simulate,
    "ensemble": run_ensemble_moments,
    "invariant": run_invariant,
    "feller": run_feller,
    "convergence": run_convergence,
    "stopprob": run_stopprob,
    "paper-suite": run_paper_suite,
}
