"""Run configuration: validated JSON, a published schema and dotted-path overrides."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..dynamics import CutoffConfig, DriftToggles
from ..integrator import SchemeKind, SimulationConfig, StopThresholds
from ..noise import AdditiveDiagonal, DiagonalMultiplicative, DiffusionSpec, ScalarMultiplicative
from ..spectral import ModelParams, SpectralField, SpectralGrid, random_field, read_field_dump

OUTSIDE_REGIME = "outside the global-existence regime"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSection(_Strict):
    K: int = Field(16, ge=1)
    M: int | None = None
    pad: float = Field(2.0, ge=2.0)
    shell_cutoff: float | None = None


class ModelSection(_Strict):
    a: float = 0.5
    b: float = 3.5
    gradient_term: bool = True
    cubic_term: bool = True


class DiffusionSection(_Strict):
    kind: Literal["additive_diagonal", "scalar_multiplicative", "diagonal_multiplicative"] = "additive_diagonal"
    shell_sigma: dict[int, float] = Field(default_factory=lambda: {1: 0.5, 2: 0.5})
    sigma: list[float] | None = None
    kappa: float = 0.2
    gamma: float | list[float] = 0.1


class TimeSection(_Strict):
    scheme: SchemeKind = SchemeKind.SEMI_IMPLICIT_EM
    dt: float = Field(1e-3, gt=0)
    t_end: float = Field(1.0, gt=0)
    ceiling: float = Field(1e6, gt=0)

    @model_validator(mode="after")
    def _dt_fits(self):
        if self.dt > self.t_end:
            raise ValueError("dt must not exceed t_end")
        return self


class InitialSection(_Strict):
    kind: Literal["zero", "constant", "mode", "random", "file"] = "random"
    value: float = 0.0
    k: int = 1
    l: int = 0
    mode_kind: Literal["cos", "sin"] = "cos"
    amplitude: float = 0.5
    decay: float = 4.0
    seed: int = 0
    path: str | None = None


class EnsembleSection(_Strict):
    n_paths: int = Field(16, ge=1)
    base_seed: int = Field(0, ge=0)
    coupling: Literal["independent", "coupled"] = "coupled"
    chunk_size: int = Field(16, ge=1)


class StopSection(_Strict):
    rho_N: float | None = Field(None, gt=0)
    xi: list[tuple[int, float]] = Field(default_factory=list)
    eta: list[tuple[int, float]] = Field(default_factory=list)

    @field_validator("xi", "eta")
    @classmethod
    def _positive(cls, v):
        if any(r <= 0 or m < 0 for m, r in v):
            raise ValueError("thresholds need m >= 0 and r > 0")
        return v


class SimulateParams(_Strict):
    kind: Literal["simulate"] = "simulate"
    path_index: int = Field(0, ge=0)
    snapshot_stride: int = Field(100, ge=0)
    m: int = Field(1, ge=0)


class EnsembleParams(_Strict):
    kind: Literal["ensemble"] = "ensemble"
    m: int = Field(1, ge=0)
    p: float = Field(2.0, ge=2.0)
    T: float | None = Field(None, gt=0)


class InvariantParams(_Strict):
    kind: Literal["invariant"] = "invariant"
    T_avg: float = Field(20.0, gt=0)
    burn_in: float | None = Field(None, ge=0)
    stride: int = Field(10, ge=1)
    observables: list[str] = Field(default_factory=lambda: ["sobolev_sq(0)", "sobolev_sq(2)", "sobolev_sq(4)"])
    capacity: int = Field(4096, ge=2)
    m: int = Field(1, ge=0)
    moments_q: list[float] = Field(default_factory=lambda: [2.0, 4.0, 6.0])
    radii: list[float] = Field(default_factory=list)

    @field_validator("observables")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("no observables")
        from ..invariant import parse_observable
        for text in v:
            parse_observable(text)
        return v


class FellerParams(_Strict):
    kind: Literal["feller"] = "feller"
    t: float = Field(1.0, gt=0)
    h: float = Field(0.4, gt=0)
    levels: int = Field(4, ge=2)
    observable: str = "atan_mode(1,0,cos)"
    direction_seed: int = 1
    m: int = Field(1, ge=0)


class ConvergenceParams(_Strict):
    kind: Literal["convergence"] = "convergence"
    shell_ladder: list[float] = Field(default_factory=lambda: [16.0, 36.0, 64.0])
    dts: list[float] = Field(default_factory=list)
    m: int = Field(1, ge=0)

    @field_validator("shell_ladder")
    @classmethod
    def _ladder(cls, v):
        if not v or any(x <= 0 for x in v):
            raise ValueError("shell_ladder needs at least one positive level")
        return v


class StopProbParams(_Strict):
    kind: Literal["stopprob"] = "stopprob"
    stop_kind: Literal["xi", "eta"] = "xi"
    r0: float = Field(16.0, gt=0)
    multiples: list[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    t: float = Field(5.0, gt=0)
    m: int = Field(1, ge=0)


class PaperSuiteParams(_Strict):
    kind: Literal["paper-suite"] = "paper-suite"
    scale: Literal["full", "smoke"] = "full"


ExperimentSection = Annotated[
    Union[SimulateParams, EnsembleParams, InvariantParams, FellerParams, ConvergenceParams,
          StopProbParams, PaperSuiteParams],
    Field(discriminator="kind"),
]

EXPERIMENT_KINDS = ("simulate", "ensemble", "invariant", "feller", "convergence", "stopprob", "paper-suite")


class RunConfig(_Strict):
    grid: GridSection = Field(default_factory=GridSection)
    model: ModelSection = Field(default_factory=ModelSection)
    cutoff_N: float | None = Field(None, gt=0)
    diffusion: DiffusionSection = Field(default_factory=DiffusionSection)
    time: TimeSection = Field(default_factory=TimeSection)
    initial: InitialSection = Field(default_factory=InitialSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    stops: StopSection = Field(default_factory=StopSection)
    experiment: ExperimentSection = Field(default_factory=SimulateParams)
    output_dir: str = "runs/out"
    workers: int = Field(1, ge=1)

    # -- derived objects --------------------------------------------------

    @property
    def global_regime(self) -> bool:
        return abs(self.model.b) < 4.0

    def regime_stamp(self) -> str | None:
        return None if self.global_regime else OUTSIDE_REGIME

    def spectral_grid(self) -> SpectralGrid:
        return SpectralGrid(self.grid.K, self.grid.M, self.grid.pad)

    def diffusion_spec(self) -> DiffusionSpec:
        d = self.diffusion
        if d.kind == "additive_diagonal":
            if d.sigma is not None:
                return AdditiveDiagonal(tuple(d.sigma))
            return AdditiveDiagonal.on_shells(d.shell_sigma)
        if d.kind == "scalar_multiplicative":
            return ScalarMultiplicative(d.kappa)
        g = d.gamma
        return DiagonalMultiplicative(tuple(g) if isinstance(g, list) else g)

    def simulation(self, m: int = 1) -> SimulationConfig:
        s = self.stops
        return SimulationConfig(
            grid=self.spectral_grid(),
            params=ModelParams(self.model.a, self.model.b),
            diffusion=self.diffusion_spec(),
            scheme=self.time.scheme,
            dt=self.time.dt,
            t_end=self.time.t_end,
            cutoff=None if self.cutoff_N is None else CutoffConfig(self.cutoff_N),
            toggles=DriftToggles(self.model.gradient_term, self.model.cubic_term),
            shell_cutoff=self.grid.shell_cutoff,
            m=m,
            thresholds=StopThresholds(s.rho_N, tuple(map(tuple, s.xi)), tuple(map(tuple, s.eta))),
            ceiling=self.time.ceiling,
        )

    def initial_field(self) -> SpectralField:
        ic = self.initial
        K = self.grid.K
        if ic.kind == "zero":
            return SpectralField.zeros(K)
        if ic.kind == "constant":
            return SpectralField.constant(K, ic.value)
        if ic.kind == "mode":
            make = SpectralField.cosine if ic.mode_kind == "cos" else SpectralField.sine
            return make(K, ic.k, ic.l, ic.amplitude)
        if ic.kind == "random":
            return random_field(K, np.random.default_rng(ic.seed), amplitude=ic.amplitude, decay=ic.decay)
        if ic.path is None:
            raise ValueError("initial.path is required for kind 'file'")
        u, _ = read_field_dump(ic.path)
        if u.K != K:
            raise ValueError(f"initial field file has K={u.K}, config has K={K}")
        return u

    # -- identity ---------------------------------------------------------

    def payload_dict(self) -> dict:
        """Config echo without the fields that must not affect outputs."""
        return self.model_dump(mode="json", exclude={"output_dir", "workers"})

    def run_id(self) -> str:
        blob = json.dumps(self.payload_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ConfigError(ValueError):
    """Schema violation; the message lists field paths."""


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "\n".join(lines)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values parse as JSON when possible."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = out
        for k in keys[:-1]:
            nxt = node.get(k)
            if not isinstance(nxt, dict):
                nxt = {}
                node[k] = nxt
            node = nxt
        node[keys[-1]] = _parse_value(raw)
    return out


def build_config(data: dict | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = apply_overrides(data or {}, overrides or [])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    return build_config(data, overrides)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)


def config_schema() -> dict:
    return RunConfig.model_json_schema()
