"""Long-time averages along a single path and diagnostics of the resulting empirical measure.

The time average over a window ``[burn_in, burn_in + T_avg]`` of grid samples
defines the empirical measure nu_T.  Observable averages are exact sample
means; standard errors use batch means, since consecutive samples are
correlated.  A bounded reservoir of states supports norm moments, ball
masses and the shell energy spectrum.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .integrator import SimulationConfig, simulate
from .spectral import L2_WEIGHT, SpectralField, eigenvalue_grid, shell_inventory

DEFAULT_CAPACITY = 4096
DEFAULT_BATCHES = 20
MIN_SAMPLES = 100


# -- observables -------------------------------------------------------------

@dataclass(frozen=True)
class Observable:
    """Deterministic real functional of a field.

    ``batch`` evaluates a stack of coefficient arrays (P, 2K+1, 2K+1) at once.
    Built-in evaluators are module-level callables so observables pickle.
    """

    name: str
    batch: Callable[[np.ndarray], np.ndarray]
    bounded: bool = False

    def __call__(self, u: SpectralField) -> float:
        return float(self.batch(u.coeffs[None])[0])

    def scaled(self, alpha: float, name: str | None = None) -> Observable:
        return Observable(name or f"{alpha}*{self.name}", _Scaled(alpha, self.batch), self.bounded)

    def plus(self, other: Observable, name: str | None = None) -> Observable:
        return Observable(name or f"{self.name}+{other.name}", _Sum(self.batch, other.batch),
                          self.bounded and other.bounded)


@dataclass(frozen=True)
class _Scaled:
    alpha: float
    f: Callable

    def __call__(self, c):
        return self.alpha * self.f(c)


@dataclass(frozen=True)
class _Sum:
    f: Callable
    g: Callable

    def __call__(self, c):
        return self.f(c) + self.g(c)


def _energy(c: np.ndarray) -> np.ndarray:
    return c.real**2 + c.imag**2


@dataclass(frozen=True)
class _Constant:
    value: float

    def __call__(self, c):
        return np.full(c.shape[0], self.value)


@dataclass(frozen=True)
class _SobolevSq:
    alpha: float

    def __call__(self, c):
        K = (c.shape[-1] - 1) // 2
        w = L2_WEIGHT * (1.0 + eigenvalue_grid(K)) ** self.alpha
        return (_energy(c) * w).sum(axis=(-2, -1))


@dataclass(frozen=True)
class _NormPower:
    q: float
    alpha: float

    def __call__(self, c):
        return _SobolevSq(self.alpha)(c) ** (self.q / 2.0)


@dataclass(frozen=True)
class _ModeCoefficient:
    """Orthonormal real coefficient of cos(kx+ly)/(sqrt2 pi) or sin(kx+ly)/(sqrt2 pi); 1/(2 pi) for k=l=0."""

    k: int
    l: int
    kind: str = "cos"

    def __call__(self, c):
        K = (c.shape[-1] - 1) // 2
        v = c[..., K + self.k, K + self.l]
        if (self.k, self.l) == (0, 0):
            return 2.0 * math.pi * v.real
        s = 2.0 * math.sqrt(2.0) * math.pi
        return s * v.real if self.kind == "cos" else -s * v.imag


@dataclass(frozen=True)
class _Square:
    f: Callable

    def __call__(self, c):
        return self.f(c) ** 2


@dataclass(frozen=True)
class _Arctan:
    f: Callable
    scale: float

    def __call__(self, c):
        return np.arctan(self.f(c) / self.scale)


@dataclass(frozen=True)
class _Saturated:
    alpha: float
    scale: float

    def __call__(self, c):
        r = np.sqrt(_SobolevSq(self.alpha)(c))
        return r / (self.scale + r)


def _check_kind(kind: str):
    if kind not in ("cos", "sin"):
        raise ValueError("kind must be 'cos' or 'sin'")


def constant_observable(value: float = 1.0) -> Observable:
    return Observable(f"const({value})", _Constant(float(value)), bounded=True)


def sobolev_sq_observable(alpha: float) -> Observable:
    """||u||_alpha^2."""
    return Observable(f"sobolev_sq({alpha})", _SobolevSq(float(alpha)))


def norm_power_observable(q: float, alpha: float = 0.0) -> Observable:
    return Observable(f"norm_pow({q},{alpha})", _NormPower(float(q), float(alpha)))


def mode_coefficient(k: int, l: int, kind: str = "cos") -> Observable:
    """Orthonormal real coefficient a_j of one basis function (linear, unbounded)."""
    _check_kind(kind)
    return Observable(f"coef({k},{l},{kind})", _ModeCoefficient(k, l, kind))


def mode_amplitude_sq(k: int, l: int, kind: str = "cos") -> Observable:
    """Squared orthonormal coefficient a_j^2 of one real basis function."""
    _check_kind(kind)
    return Observable(f"amp_sq({k},{l},{kind})", _Square(_ModeCoefficient(k, l, kind)))


def saturated_mode(k: int, l: int, kind: str = "cos", scale: float = 1.0) -> Observable:
    """Bounded Lipschitz observable arctan(a_j / scale)."""
    _check_kind(kind)
    return Observable(f"atan_mode({k},{l},{kind})", _Arctan(_ModeCoefficient(k, l, kind), scale), bounded=True)


def saturated_norm(alpha: float = 0.0, scale: float = 1.0) -> Observable:
    """Bounded Lipschitz observable ||u||_alpha / (scale + ||u||_alpha)."""
    return Observable(f"sat_norm({alpha})", _Saturated(float(alpha), float(scale)), bounded=True)


_OBS_PATTERN = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def parse_observable(text: str) -> Observable:
    """Build a built-in observable from ``name(args)``, e.g. ``amp_sq(1,0,cos)`` or ``sobolev_sq(4)``."""
    m = _OBS_PATTERN.match(text)
    if not m:
        raise ValueError(f"cannot parse observable {text!r}")
    name = m.group(1)
    args = [a.strip() for a in (m.group(2) or "").split(",") if a.strip()]
    num = lambda i: float(args[i])
    try:
        if name == "const":
            return constant_observable(num(0) if args else 1.0)
        if name == "sobolev_sq":
            return sobolev_sq_observable(num(0))
        if name == "norm_pow":
            return norm_power_observable(num(0), num(1) if len(args) > 1 else 0.0)
        if name == "coef":
            return mode_coefficient(int(args[0]), int(args[1]), args[2] if len(args) > 2 else "cos")
        if name == "amp_sq":
            return mode_amplitude_sq(int(args[0]), int(args[1]), args[2] if len(args) > 2 else "cos")
        if name == "atan_mode":
            return saturated_mode(int(args[0]), int(args[1]), args[2] if len(args) > 2 else "cos",
                                  num(3) if len(args) > 3 else 1.0)
        if name == "sat_norm":
            return saturated_norm(num(0) if args else 0.0, num(1) if len(args) > 1 else 1.0)
    except (IndexError, ValueError) as e:
        raise ValueError(f"bad arguments for observable {text!r}: {e}") from None
    raise ValueError(f"unknown observable {name!r}")


# -- empirical measure ---------------------------------------------------------

def batch_means_se(x: np.ndarray, batches: int = DEFAULT_BATCHES) -> float:
    """Standard error of the mean of a correlated series from non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        return float("nan")
    b = min(batches, n)
    size = n // b
    means = x[: b * size].reshape(b, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(b))


class Reservoir:
    """Time-uniform subsample of states with fixed capacity.

    Every ``skip``-th offered state is kept; when the buffer fills, every other
    entry is dropped and ``skip`` doubles.  The result depends only on the
    number of offers, never on randomness.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 2:
            raise ValueError("reservoir capacity must be >= 2")
        self.capacity = capacity
        self.skip = 1
        self.offered = 0
        self.times: list[float] = []
        self.states: list[np.ndarray] = []

    def offer(self, t: float, c: np.ndarray):
        if self.offered % self.skip == 0:
            if len(self.states) == self.capacity:
                self.times = self.times[::2]
                self.states = self.states[::2]
                self.skip *= 2
            if self.offered % self.skip == 0:
                self.times.append(float(t))
                self.states.append(np.array(c, copy=True))
        self.offered += 1

    def __len__(self) -> int:
        return len(self.states)

    def stack(self) -> np.ndarray:
        return np.array(self.states)


@dataclass
class EmpiricalMeasure:
    """Time-averaged observables and a state reservoir for one window."""

    names: list[str]
    values: dict[str, np.ndarray]
    sample_times: np.ndarray
    reservoir_times: np.ndarray
    reservoir: np.ndarray
    T_avg: float
    burn_in: float
    stride: int
    seed: int
    path_index: int
    K: int
    u0_norm: float
    blowup: bool = False
    blowup_time: float | None = None
    bounded: dict[str, bool] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.sample_times)

    @property
    def weight_total(self) -> float:
        return float(self.n_samples)

    def average(self, name: str) -> float:
        return float(np.mean(self.values[name]))

    def stderr(self, name: str, batches: int = DEFAULT_BATCHES) -> float:
        return batch_means_se(self.values[name], batches)

    def summary(self) -> dict:
        return {n: {"mean": self.average(n), "se": self.stderr(n)} for n in self.names}


def kb_average(u0: SpectralField, cfg: SimulationConfig, T_avg: float,
               observables: Sequence[Observable], burn_in: float | None = None,
               stride: int = 1, seed: int = 0, path_index: int = 0,
               capacity: int = DEFAULT_CAPACITY) -> EmpiricalMeasure:
    """Sample observables every ``stride`` steps on ``[burn_in, burn_in + T_avg]``.

    ``burn_in`` defaults to 20% of ``T_avg``.  Grid times are n dt, so the
    window edges are rounded to the nearest step.
    """
    if not T_avg > 0:
        raise ValueError("T_avg must be positive")
    if not observables:
        raise ValueError("no observables")
    names = [o.name for o in observables]
    if len(set(names)) != len(names):
        raise ValueError("observable names must be unique")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    burn_in = 0.2 * T_avg if burn_in is None else burn_in
    if burn_in < 0:
        raise ValueError("burn_in must be nonnegative")
    dt = cfg.dt
    n0 = int(round(burn_in / dt))
    n_win = int(round(T_avg / dt))
    n_samples = n_win // stride + 1
    if n_samples < MIN_SAMPLES:
        raise ValueError(f"stride {stride} leaves {n_samples} samples in the window; need >= {MIN_SAMPLES}")
    n_end = n0 + (n_samples - 1) * stride
    run = cfg.replace(t_end=n_end * dt)

    vals = {n: np.empty(n_samples) for n in names}
    times = np.empty(n_samples)
    res = Reservoir(capacity)
    count = [0]

    def observe(n, t, states, alive):
        if n < n0 or (n - n0) % stride or not alive[0][0]:
            return
        i = count[0]
        c = states[0]
        times[i] = t
        for o in observables:
            vals[o.name][i] = o.batch(c)[0]
        res.offer(t, c[0])
        count[0] += 1

    rec = simulate(u0, run, [path_index], seed, observer=observe, record=False)[0]
    k = count[0]
    return EmpiricalMeasure(
        names=names,
        values={n: v[:k] for n, v in vals.items()},
        sample_times=times[:k],
        reservoir_times=np.array(res.times),
        reservoir=res.stack() if len(res) else np.zeros((0, cfg.grid.n, cfg.grid.n), complex),
        T_avg=T_avg, burn_in=burn_in, stride=stride, seed=seed, path_index=path_index,
        K=cfg.grid.K, u0_norm=u0.norm(),
        blowup=rec.blew_up, blowup_time=rec.stops.blowup_time,
        bounded={o.name: o.bounded for o in observables},
    )


# -- reservoir diagnostics -----------------------------------------------------

@dataclass
class NuEstimate:
    estimate: float
    se: float
    n: int
    alpha: float | None = None
    alpha_ceiling: float | None = None

    @property
    def above_ceiling(self) -> bool:
        return self.alpha is not None and self.alpha_ceiling is not None and self.alpha > self.alpha_ceiling


def _reservoir_sq_norms(measure: EmpiricalMeasure, alpha: float) -> np.ndarray:
    if len(measure.reservoir) == 0:
        raise ValueError("reservoir is empty")
    return sobolev_sq_observable(alpha).batch(measure.reservoir)


def moment_under_nu(measure: EmpiricalMeasure, q: float) -> NuEstimate:
    """Reservoir average of ||u||^q."""
    x = _reservoir_sq_norms(measure, 0.0) ** (q / 2.0)
    return NuEstimate(float(x.mean()), batch_means_se(x), len(x))


def sobolev_moment_under_nu(measure: EmpiricalMeasure, alpha: float) -> NuEstimate:
    """Reservoir average of ||u||_alpha^2, with the resolution ceiling attached."""
    x = _reservoir_sq_norms(measure, alpha)
    return NuEstimate(float(x.mean()), batch_means_se(x), len(x), alpha, resolution_ceiling(measure))


def tightness_mass(measure: EmpiricalMeasure, R: float, alpha: float) -> float:
    """Fraction of reservoir states in the closed H^alpha ball of radius R."""
    if R < 0:
        raise ValueError("R must be nonnegative")
    r = np.sqrt(_reservoir_sq_norms(measure, alpha))
    return float(np.mean(r <= R))


@dataclass
class SpectrumProfile:
    shells: np.ndarray
    energy: np.ndarray
    se: np.ndarray
    multiplicity: np.ndarray
    decay_exponent: float | None


def shell_energies(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-shell sums of squared orthonormal coefficients, shape (..., n_shells)."""
    K = (c.shape[-1] - 1) // 2
    lam = eigenvalue_grid(K)
    inv = shell_inventory(K, K * K)
    shells = np.array(sorted(inv))
    e = L2_WEIGHT * _energy(c)
    idx = np.searchsorted(shells, lam[lam <= K * K])
    flat = e[..., lam <= K * K]
    out = np.zeros(c.shape[:-2] + (len(shells),))
    for j, s in enumerate(shells):
        out[..., j] = flat[..., idx == j].sum(axis=-1)
    return shells, out


def spectral_decay_profile(measure: EmpiricalMeasure, forced_top: float | None = None) -> SpectrumProfile:
    """Reservoir-averaged E(lambda) per shell and a power-law fit of its tail.

    The fit uses shells above ``forced_top`` (default: the shell holding the
    peak) where the energy is positive; it regresses log E on log(1 + lambda).
    """
    if len(measure.reservoir) == 0:
        raise ValueError("reservoir is empty")
    shells, E = shell_energies(measure.reservoir)
    mean = E.mean(axis=0)
    se = np.array([batch_means_se(E[:, j]) for j in range(E.shape[1])])
    inv = shell_inventory(measure.K, measure.K**2)
    mult = np.array([inv[s] for s in shells])
    top = shells[np.argmax(mean)] if forced_top is None else forced_top
    tail = (shells > top) & (mean > 0)
    exponent = None
    if tail.sum() >= 3:
        exponent = float(np.polyfit(np.log1p(shells[tail]), np.log(mean[tail]), 1)[0])
    return SpectrumProfile(shells, mean, se, mult, exponent)


def resolution_ceiling(measure: EmpiricalMeasure, edge_fraction: float = 0.01) -> float:
    """Largest alpha for which the outer ring of shells carries <= edge_fraction of ||u||_alpha^2.

    Beyond it, norms of order alpha are dominated by the truncation edge.
    Returns inf when the outer ring holds no energy.
    """
    K = measure.K
    shells, E = shell_energies(measure.reservoir)
    mean = E.mean(axis=0)
    edge = shells > (K - 1) ** 2
    if not np.any(mean[edge] > 0):
        return math.inf

    def frac(alpha):
        w = (1.0 + shells) ** alpha * mean
        return w[edge].sum() / w.sum()

    lo, hi = -2.0, 2.0
    if frac(lo) > edge_fraction:
        return lo
    while frac(hi) <= edge_fraction:
        hi *= 2
        if hi > 1e3:
            return math.inf
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if frac(mid) <= edge_fraction:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class ErgodicityRow:
    name: str
    averages: np.ndarray
    ses: np.ndarray
    spread: float
    pooled_se: float

    @property
    def ratio(self) -> float:
        return self.spread / self.pooled_se if self.pooled_se > 0 else (0.0 if self.spread == 0 else math.inf)


def ergodicity_probe(u0_list: Sequence[SpectralField], cfg: SimulationConfig, T_avg: float,
                     observables: Sequence[Observable], burn_in: float | None = None,
                     stride: int = 1, seed: int = 0, independent_noise: bool = True,
                     mapper: Callable = map) -> list[ErgodicityRow]:
    """Spread of time averages across starting points, against the within-run standard errors.

    Small spread is evidence for, never proof of, a unique ergodic measure.
    Start i uses noise path i unless ``independent_noise`` is False.
    """
    if len(u0_list) < 2:
        raise ValueError("need at least two starting points")
    tasks = [(u0, cfg, T_avg, list(observables), burn_in, stride, seed, i if independent_noise else 0)
             for i, u0 in enumerate(u0_list)]
    measures = list(mapper(_kb_task, tasks))
    rows = []
    for o in observables:
        av = np.array([m.average(o.name) for m in measures])
        se = np.array([m.stderr(o.name) for m in measures])
        rows.append(ErgodicityRow(o.name, av, se, float(av.max() - av.min()),
                                  float(np.sqrt(np.mean(se**2)))))
    return rows


def _kb_task(args):
    u0, cfg, T_avg, obs, burn_in, stride, seed, path = args
    return kb_average(u0, cfg, T_avg, obs, burn_in, stride, seed, path)


# -- persistence ---------------------------------------------------------------

def measure_header(measure: EmpiricalMeasure, raw_name: str) -> dict:
    """JSON description of a measure whose reservoir lives in ``raw_name``."""
    n = (2 * measure.K + 1) ** 2
    return {
        "K": measure.K,
        "T_avg": measure.T_avg,
        "burn_in": measure.burn_in,
        "stride": measure.stride,
        "seed": measure.seed,
        "path_index": measure.path_index,
        "u0_norm": measure.u0_norm,
        "n_samples": measure.n_samples,
        "blowup": measure.blowup,
        "blowup_time": measure.blowup_time,
        "observables": {nm: {"mean": measure.average(nm), "se": measure.stderr(nm),
                             "bounded": measure.bounded.get(nm, False)} for nm in measure.names},
        "sample_times": measure.sample_times.tolist(),
        "values": {nm: v.tolist() for nm, v in measure.values.items()},
        "reservoir": {
            "file": raw_name,
            "dtype": "<c16",
            "shape": [2 * measure.K + 1, 2 * measure.K + 1],
            "index": [{"time": float(t), "offset": i * n * 16} for i, t in enumerate(measure.reservoir_times)],
        },
    }


def save_measure(measure: EmpiricalMeasure, path: str | Path) -> tuple[Path, Path]:
    """JSON summary plus a raw dump of the reservoir (complex128 blocks, little endian)."""
    path = Path(path)
    raw = path.with_suffix(".reservoir.bin")
    measure.reservoir.astype("<c16").tofile(raw)
    path.write_text(json.dumps(measure_header(measure, raw.name), indent=1))
    return path, raw


def load_measure(path: str | Path) -> EmpiricalMeasure:
    path = Path(path)
    h = json.loads(path.read_text())
    r = h["reservoir"]
    n = r["shape"][0]
    states = np.fromfile(path.parent / r["file"], dtype=r["dtype"]).reshape(-1, n, n)
    names = list(h["observables"])
    return EmpiricalMeasure(
        names=names,
        values={nm: np.array(h["values"][nm]) for nm in names},
        sample_times=np.array(h["sample_times"]),
        reservoir_times=np.array([e["time"] for e in r["index"]]),
        reservoir=states,
        T_avg=h["T_avg"], burn_in=h["burn_in"], stride=h["stride"], seed=h["seed"],
        path_index=h["path_index"], K=h["K"], u0_norm=h["u0_norm"],
        blowup=h["blowup"], blowup_time=h["blowup_time"],
        bounded={nm: h["observables"][nm]["bounded"] for nm in names},
    )
