"""Time stepping of the cut-off Galerkin system and stopping-time bookkeeping.

Every scheme treats exactly A^2 = (1 + lam)^2 per mode implicitly (or
exactly); the rest of the drift, ``g(u) = -(a+3) u + 4 A u - b|grad u|^2 - u^3``,
is explicit.  With the cut-off factor ``d = delta_N(||u||_2)``:

    semi-implicit EM:  u+ = (u + dt d g(u) + d phi(u) dW) / (1 + dt A^2)
    exponential EM:    u+ = exp(-dt A^2) (u + dt d g(u) + d phi(u) dW)
    tamed explicit EM: u+ = u - dt A^2 u + dt d g(u) / (1 + dt ||g(u)||) + d phi(u) dW

Paths are advanced in batches; each path draws its own counter-based noise,
so results do not depend on how paths are grouped.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dynamics import FULL_DRIFT, CutoffConfig, DriftToggles, Nonlinearity, cutoff_factor
from .noise import DiffusionSpec, NoiseSource
from .spectral import L2_WEIGHT, ModelParams, RealBasis, SpectralField, SpectralGrid

DEFAULT_CEILING = 1e6


class SchemeKind(str, Enum):
    SEMI_IMPLICIT_EM = "semi_implicit_em"
    TAMED_EXPLICIT_EM = "tamed_explicit_em"
    EXPONENTIAL_EM = "exponential_em"


class BlowupError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    t_end: float

    def __post_init__(self):
        if not (self.dt > 0 and self.t_end > 0):
            raise ValueError("dt and t_end must be positive")
        if self.dt > self.t_end:
            raise ValueError(f"dt={self.dt} exceeds t_end={self.t_end}")

    @property
    def step_count(self) -> int:
        return max(1, math.ceil(self.t_end / self.dt - 1e-9))

    def time(self, n):
        return n * self.dt


@dataclass(frozen=True)
class StopThresholds:
    """rho_N on ||u||_2; xi as (m, r) pairs on ||A^m u||^2; eta as (m, r) on t ||A^{m+1} u||^2."""

    rho_N: float | None = None
    xi: tuple[tuple[int, float], ...] = ()
    eta: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        vals = [r for _, r in self.xi] + [r for _, r in self.eta]
        if self.rho_N is not None:
            vals.append(self.rho_N)
        if any(not v > 0 for v in vals):
            raise ValueError("stopping thresholds must be positive")
        object.__setattr__(self, "xi", tuple((int(m), float(r)) for m, r in self.xi))
        object.__setattr__(self, "eta", tuple((int(m), float(r)) for m, r in self.eta))

    def norm_orders(self) -> set[float]:
        orders = {2.0 * m for m, _ in self.xi} | {2.0 * m + 2 for m, _ in self.eta}
        if self.rho_N is not None:
            orders.add(2.0)
        return orders


@dataclass
class StoppingRecord:
    """First grid times of each stopping event; entries are set once and never overwritten."""

    rho_N: float | None = None
    xi: dict = field(default_factory=dict)
    eta: dict = field(default_factory=dict)
    blowup_flag: bool = False
    blowup_time: float | None = None

    def to_dict(self) -> dict:
        return {
            "rho_N": self.rho_N,
            "xi": [[m, r, t] for (m, r), t in self.xi.items()],
            "eta": [[m, r, t] for (m, r), t in self.eta.items()],
            "blowup_flag": self.blowup_flag,
            "blowup_time": self.blowup_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> StoppingRecord:
        return cls(d["rho_N"], {(m, r): t for m, r, t in d["xi"]},
                   {(m, r): t for m, r, t in d["eta"]}, d["blowup_flag"], d["blowup_time"])


class StopDetector:
    """Online first-exceedance detection for a batch of paths."""

    def __init__(self, thresholds: StopThresholds, n_paths: int,
                 initial: Sequence[StoppingRecord] | None = None):
        self.th = thresholds
        self.rho = np.full(n_paths, np.nan)
        self.xi = np.full((len(thresholds.xi), n_paths), np.nan)
        self.eta = np.full((len(thresholds.eta), n_paths), np.nan)
        if initial is not None:
            for p, rec in enumerate(initial):
                if rec.rho_N is not None:
                    self.rho[p] = rec.rho_N
                for i, key in enumerate(thresholds.xi):
                    if rec.xi.get(key) is not None:
                        self.xi[i, p] = rec.xi[key]
                for i, key in enumerate(thresholds.eta):
                    if rec.eta.get(key) is not None:
                        self.eta[i, p] = rec.eta[key]

    @staticmethod
    def _mark(slot: np.ndarray, hit: np.ndarray, t: float):
        new = hit & np.isnan(slot)
        slot[new] = t

    def update(self, t: float, norm_of: Callable[[float], np.ndarray], alive=None):
        """``norm_of(alpha)`` returns ||u||_alpha for every path at grid time t."""
        live = np.ones(len(self.rho), bool) if alive is None else alive
        if self.th.rho_N is not None:
            self._mark(self.rho, live & (norm_of(2.0) > self.th.rho_N), t)
        for i, (m, r) in enumerate(self.th.xi):
            self._mark(self.xi[i], live & (norm_of(2.0 * m) ** 2 > r), t)
        for i, (m, r) in enumerate(self.th.eta):
            self._mark(self.eta[i], live & (t * norm_of(2.0 * m + 2) ** 2 > r), t)

    def record(self, p: int) -> StoppingRecord:
        f = lambda v: None if np.isnan(v) else float(v)
        return StoppingRecord(
            rho_N=f(self.rho[p]),
            xi={key: f(self.xi[i, p]) for i, key in enumerate(self.th.xi)},
            eta={key: f(self.eta[i, p]) for i, key in enumerate(self.th.eta)},
        )


def first_exceedance(times: np.ndarray, values: np.ndarray, threshold: float) -> float | None:
    """Earliest sampled time with value > threshold."""
    idx = np.flatnonzero(np.asarray(values) > threshold)
    return float(times[idx[0]]) if len(idx) else None


def detect_stops(times: np.ndarray, norms: dict[float, np.ndarray],
                 thresholds: StopThresholds, record: StoppingRecord | None = None) -> StoppingRecord:
    """Fold a norm history through the same detector used online.

    ``norms`` maps a Sobolev order alpha to the series ||u(t_i)||_alpha.
    """
    times = np.asarray(times, dtype=float)
    det = StopDetector(thresholds, 1, None if record is None else [record])
    for i, t in enumerate(times):
        det.update(float(t), lambda a: np.array([norms[a][i]]))
    out = det.record(0)
    if record is not None:
        out.blowup_flag, out.blowup_time = record.blowup_flag, record.blowup_time
    return out


@dataclass(frozen=True)
class SimulationConfig:
    grid: SpectralGrid
    params: ModelParams
    diffusion: DiffusionSpec
    scheme: SchemeKind = SchemeKind.SEMI_IMPLICIT_EM
    dt: float = 1e-3
    t_end: float = 1.0
    cutoff: CutoffConfig | None = None
    toggles: DriftToggles = FULL_DRIFT
    shell_cutoff: float | None = None
    m: int = 1
    thresholds: StopThresholds = StopThresholds()
    snapshot_stride: int = 0
    ceiling: float = DEFAULT_CEILING
    noise_refinement: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scheme", SchemeKind(self.scheme))
        if self.shell_cutoff is None:
            object.__setattr__(self, "shell_cutoff", float(self.grid.K**2))
        TimeGrid(self.dt, self.t_end)

    def replace(self, **changes) -> SimulationConfig:
        return dataclasses.replace(self, **changes)

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.dt, self.t_end)

    @cached_property
    def basis(self) -> RealBasis:
        return RealBasis(self.grid.K, self.shell_cutoff)

    @property
    def norm_orders(self) -> tuple[float, ...]:
        orders = {0.0, 2.0, 2.0 * self.m, 2.0 * self.m + 2} | self.thresholds.norm_orders()
        return tuple(sorted(orders))


class Stepper:
    """One scheme, one parameter set; advances batches of coefficient arrays."""

    def __init__(self, cfg: SimulationConfig):
        self.cfg = cfg
        g = cfg.grid
        self.K = g.K
        A = g.A
        self.A = A
        self.A2 = A * A
        self.mask = (g.lam <= cfg.shell_cutoff).astype(float)
        self.explicit_linear = (4.0 * A - (cfg.params.a + 3.0)) * self.mask
        self.nonlin = Nonlinearity(g, cfg.params.b, cfg.toggles)
        self.basis = cfg.basis
        self.directions = cfg.diffusion.directions(self.basis)
        dt = cfg.dt
        if cfg.scheme is SchemeKind.SEMI_IMPLICIT_EM:
            self.denom = 1.0 + dt * self.A2
        elif cfg.scheme is SchemeKind.EXPONENTIAL_EM:
            self.decay = np.exp(-dt * self.A2)
        self.orders = cfg.norm_orders
        self._order_index = {a: i for i, a in enumerate(self.orders)}
        self.weights = np.stack([(L2_WEIGHT * A**a).ravel() for a in self.orders])

    def norms(self, c: np.ndarray) -> np.ndarray:
        """||u||_alpha for every configured order, shape (..., n_orders)."""
        e = (c.real**2 + c.imag**2).reshape(c.shape[:-2] + (-1,))
        return np.sqrt(e @ self.weights.T)

    def order_column(self, alpha: float) -> int:
        return self._order_index[float(alpha)]

    def explicit_drift(self, c: np.ndarray) -> np.ndarray:
        """g(u) = -f(u), Galerkin-projected."""
        g = self.explicit_linear * c
        if self.cfg.toggles.any:
            g = g - self.mask * self.nonlin(c)
        return g

    def advance(self, c: np.ndarray, dW: np.ndarray, h2: np.ndarray) -> np.ndarray:
        """One step for a batch; ``h2`` holds ||u||_2 per path (the cut-off argument)."""
        cfg = self.cfg
        dt = cfg.dt
        delta = cutoff_factor(h2, cfg.cutoff)
        d = np.asarray(delta, dtype=float).reshape(np.shape(h2) + (1, 1))
        g = self.explicit_drift(c)
        noise = self.mask * cfg.diffusion.apply(c, dW, self.basis)
        if cfg.scheme is SchemeKind.SEMI_IMPLICIT_EM:
            return (c + dt * (d * g) + d * noise) / self.denom
        if cfg.scheme is SchemeKind.EXPONENTIAL_EM:
            return self.decay * (c + dt * (d * g) + d * noise)
        e = (g.real**2 + g.imag**2).reshape(g.shape[:-2] + (-1,))
        gnorm = np.sqrt(L2_WEIGHT * e.sum(axis=-1)).reshape(np.shape(h2) + (1, 1))
        return c - dt * self.A2 * c + dt * (d * g) / (1.0 + dt * gnorm) + d * noise


def project_initial(u0: SpectralField, cfg: SimulationConfig) -> np.ndarray:
    if u0.K != cfg.grid.K:
        raise ValueError(f"initial field has K={u0.K} but grid has K={cfg.grid.K}")
    return np.where(cfg.grid.lam <= cfg.shell_cutoff, u0.coeffs, 0.0)


def step(u: SpectralField, scheme: SchemeKind | str, dt: float, params: ModelParams,
         cutoff: CutoffConfig | None, spec: DiffusionSpec, src: NoiseSource, *,
         grid: SpectralGrid | None = None, toggles: DriftToggles = FULL_DRIFT,
         shell_cutoff: float | None = None) -> SpectralField:
    """Advance one field by one step using the source's current counter."""
    grid = grid or SpectralGrid(u.K)
    cfg = SimulationConfig(grid, params, spec, scheme=scheme, dt=dt, t_end=dt, cutoff=cutoff,
                           toggles=toggles, shell_cutoff=shell_cutoff,
                           noise_refinement=src.refinement)
    st = Stepper(cfg)
    c = project_initial(u, cfg)
    dW = _draw(src, src.step, dt, st.directions)
    src.step += 1
    h2 = st.norms(c)[st.order_column(2.0)]
    with np.errstate(all="ignore"):
        out = st.advance(c, dW, h2)
    if not np.all(np.isfinite(out)):
        raise BlowupError("non-finite coefficients after step")
    return SpectralField(out)


def _draw(src: NoiseSource, n: int, dt: float, directions: np.ndarray) -> np.ndarray:
    if len(directions) == 0:
        return np.zeros(0)
    z = src.increments(n, dt, int(directions.max()) + 1)
    return z[directions]


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    norms: dict[float, np.ndarray]
    stops: StoppingRecord
    snapshot_times: np.ndarray
    snapshots: np.ndarray
    final: SpectralField
    base_seed: int
    path_index: int
    min_cutoff_factor: float = 1.0

    def norm(self, alpha: float) -> np.ndarray:
        try:
            return self.norms[float(alpha)]
        except KeyError:
            raise KeyError(f"order {alpha} not recorded; available {sorted(self.norms)}") from None

    @property
    def blew_up(self) -> bool:
        return self.stops.blowup_flag


Observer = Callable[[int, float, list, list], None]


def simulate(u0: SpectralField | Sequence[SpectralField],
             cfgs: SimulationConfig | Sequence[SimulationConfig],
             paths: Sequence[int], base_seed: int, *,
             observer: Observer | None = None, start_step: int = 0,
             initial_stops: Sequence[StoppingRecord] | None = None,
             record: bool = True):
    """Advance several systems in lockstep on shared per-path noise.

    Every config must share dt, t_end, grid and noise refinement.  Returns,
    for a single config, a list of :class:`TrajectoryRecord` (one per path);
    for a sequence of configs, one such list per config.  ``observer`` is
    called after every step (and at the start) with ``(n, t, states,
    alive)`` where ``states[s]`` is the (P, 2K+1, 2K+1) batch of system s.
    """
    single = isinstance(cfgs, SimulationConfig)
    cfgs = [cfgs] if single else list(cfgs)
    ref = cfgs[0]
    for c in cfgs[1:]:
        if (c.dt, c.t_end, c.grid, c.noise_refinement) != (ref.dt, ref.t_end, ref.grid, ref.noise_refinement):
            raise ValueError("coupled systems must share dt, t_end, grid and noise refinement")
    paths = list(paths)
    P = len(paths)
    u0s = [u0] * P if isinstance(u0, SpectralField) else list(u0)
    if len(u0s) != P:
        raise ValueError("need one initial field per path")
    tg = ref.time_grid
    n_total = tg.step_count
    steppers = [Stepper(c) for c in cfgs]
    sources = [NoiseSource(base_seed, p, refinement=ref.noise_refinement) for p in paths]
    n_dir = max((int(s.directions.max()) + 1 if len(s.directions) else 0) for s in steppers)

    states = [np.stack([project_initial(u, c) for u in u0s]) for c in cfgs]
    alive = [np.ones(P, bool) for _ in cfgs]
    n_steps = n_total - start_step
    rows = n_steps + 1 if record else 1
    hist = [np.full((P, rows, len(s.orders)), np.nan) for s in steppers]
    last = [np.zeros(P, int) for _ in cfgs]
    detectors = [StopDetector(c.thresholds, P, initial_stops) for c in cfgs]
    blow_t = [np.full(P, np.nan) for _ in cfgs]
    min_delta = [np.ones(P) for _ in cfgs]
    stride = ref.snapshot_stride
    snap_t: list[float] = []
    snaps = [[] for _ in cfgs]

    def observe(n_abs, nrm):
        t = tg.time(n_abs)
        i = n_abs - start_step
        for s, st in enumerate(steppers):
            live = alive[s]
            hist[s][live, i if record else 0] = nrm[s][live]
            last[s][live] = i
            col = st._order_index
            detectors[s].update(t, lambda a, v=nrm[s], col=col: v[:, col[float(a)]], live)
        if record and (n_abs == start_step or n_abs == n_total or (stride and n_abs % stride == 0)):
            snap_t.append(t)
            for s in range(len(cfgs)):
                snaps[s].append(states[s].copy())
        if observer is not None:
            observer(n_abs, t, states, alive)

    nrm = [st.norms(x) for st, x in zip(steppers, states)]
    observe(start_step, nrm)
    dW = np.zeros((P, n_dir))
    for n in range(start_step, n_total):
        if n_dir:
            for p, src in enumerate(sources):
                dW[p] = src.increments(n, ref.dt, n_dir)
        t_next = tg.time(n + 1)
        for s, st in enumerate(steppers):
            live = alive[s]
            if not live.any():
                continue
            h2 = nrm[s][:, st.order_column(2.0)]
            if cfgs[s].cutoff is not None:
                min_delta[s] = np.minimum(min_delta[s], np.where(live, cutoff_factor(h2, cfgs[s].cutoff), 1.0))
            with np.errstate(all="ignore"):
                new = st.advance(states[s], dW[:, st.directions] if len(st.directions) else dW[:, :0], h2)
                nn = st.norms(new)
            bad = live & (~np.all(np.isfinite(nn), axis=1) | (nn[:, st.order_column(2.0)] > cfgs[s].ceiling))
            if bad.any():
                blow_t[s][bad] = t_next
                # record the offending norms, then freeze the path
                i = n + 1 - start_step
                if record:
                    hist[s][bad, i] = nn[bad]
                last[s][bad] = i if record else 0
                alive[s] = live & ~bad
                new[bad] = 0.0
                nn[bad] = 0.0
            new[~alive[s]] = 0.0
            states[s] = new
            nrm[s] = nn
        observe(n + 1, nrm)

    results = []
    times_all = tg.time(np.arange(start_step, n_total + 1))
    for s, c in enumerate(cfgs):
        recs = []
        for p, path in enumerate(paths):
            stop = detectors[s].record(p)
            if not np.isnan(blow_t[s][p]):
                stop.blowup_flag, stop.blowup_time = True, float(blow_t[s][p])
            if initial_stops is not None and initial_stops[p].blowup_flag:
                stop.blowup_flag, stop.blowup_time = True, initial_stops[p].blowup_time
            k = last[s][p] + 1
            h = hist[s][p, :k]
            recs.append(TrajectoryRecord(
                times=times_all[:k] if record else times_all[-1:],
                norms={a: h[:, i].copy() for i, a in enumerate(steppers[s].orders)},
                stops=stop,
                snapshot_times=np.array(snap_t),
                snapshots=np.array([x[p] for x in snaps[s]]) if snaps[s] else np.zeros((0,)),
                final=SpectralField(states[s][p]),
                base_seed=base_seed,
                path_index=path,
                min_cutoff_factor=float(min_delta[s][p]),
            ))
        results.append(recs)
    return results[0] if single else results


def run_trajectory(u0: SpectralField, cfg: SimulationConfig, base_seed: int = 0,
                   path_index: int = 0) -> TrajectoryRecord:
    """One path from u0 to t_end (or blowup, which truncates the record)."""
    return simulate(u0, cfg, [path_index], base_seed)[0]


def path_chunks(n_paths: int, chunk_size: int) -> list[list[int]]:
    """Fixed partition of path indices; independent of the number of workers."""
    return [list(range(i, min(i + chunk_size, n_paths))) for i in range(0, n_paths, chunk_size)]


def _run_chunk(args):
    u0, cfg, paths, seed = args
    return simulate(u0, cfg, paths, seed)


def run_ensemble(u0: SpectralField, cfg: SimulationConfig, n_paths: int, base_seed: int,
                 chunk_size: int = 32, mapper: Callable = map) -> list[TrajectoryRecord]:
    """All paths 0..n_paths-1, in path order.  ``mapper`` may be an executor's map."""
    tasks = [(u0, cfg, chunk, base_seed) for chunk in path_chunks(n_paths, chunk_size)]
    out: list[TrajectoryRecord] = []
    for recs in mapper(_run_chunk, tasks):
        out.extend(recs)
    return out


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, rec: TrajectoryRecord, cfg: SimulationConfig) -> tuple[Path, Path]:
    """JSON header plus raw little-endian complex128 dump of the final state."""
    path = Path(path)
    raw = path.with_suffix(".bin")
    np.ascontiguousarray(rec.final.coeffs).astype("<c16").tofile(raw)
    header = {
        "K": cfg.grid.K,
        "dt": cfg.dt,
        "step": int(round(rec.times[-1] / cfg.dt)),
        "time": float(rec.times[-1]),
        "base_seed": rec.base_seed,
        "path_index": rec.path_index,
        "stops": rec.stops.to_dict(),
        "times": rec.times.tolist(),
        "norms": {repr(a): v.tolist() for a, v in rec.norms.items()},
        "min_cutoff_factor": rec.min_cutoff_factor,
        "raw": raw.name,
    }
    path.write_text(json.dumps(header))
    return path, raw


def load_checkpoint(path: str | Path) -> tuple[dict, SpectralField]:
    path = Path(path)
    header = json.loads(path.read_text())
    n = 2 * header["K"] + 1
    c = np.fromfile(path.parent / header["raw"], dtype="<c16").reshape(n, n)
    return header, SpectralField(c)


def resume_trajectory(path: str | Path, cfg: SimulationConfig) -> TrajectoryRecord:
    """Continue a checkpointed path to cfg.t_end; identical to an uninterrupted run."""
    header, state = load_checkpoint(path)
    if header["dt"] != cfg.dt or header["K"] != cfg.grid.K:
        raise ValueError("checkpoint does not match the run configuration")
    prior = StoppingRecord.from_dict(header["stops"])
    prior.xi = {tuple(k): v for k, v in prior.xi.items()}
    prior.eta = {tuple(k): v for k, v in prior.eta.items()}
    if prior.blowup_flag:
        raise BlowupError("cannot resume a path that blew up")
    rec = simulate(state, cfg, [header["path_index"]], header["base_seed"],
                   start_step=header["step"], initial_stops=[prior])[0]
    old_norms = {float(k): np.array(v) for k, v in header["norms"].items()}
    rec.times = np.concatenate([np.array(header["times"]), rec.times[1:]])
    rec.norms = {a: np.concatenate([old_norms[a], v[1:]]) for a, v in rec.norms.items()}
    rec.min_cutoff_factor = min(rec.min_cutoff_factor, header["min_cutoff_factor"])
    return rec
