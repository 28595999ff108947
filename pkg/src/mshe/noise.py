"""Truncated cylindrical Wiener noise and the built-in diffusion coefficients.

Wiener direction e_j is paired with the real eigenfunction w_j of
:class:`~mshe.spectral.RealBasis`.  Increments come from a counter-based
generator (Philox keyed by ``(base_seed, path_index)``, counter set by the
step), so a given ``(seed, path, step, direction)`` always yields the same
number regardless of how paths are scheduled or how many directions are drawn.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import ClassVar, Sequence

import numpy as np
from scipy.special import ndtri

from .spectral import RealBasis, SpectralField, random_field, sobolev_norm

_MASK64 = (1 << 64) - 1


@dataclass
class NoiseSource:
    """Per-trajectory stream of Brownian increments.

    With ``refinement = R`` a step of size dt is assembled from R fine
    increments of size dt / R taken at fine steps ``n R, ..., n R + R - 1``,
    so runs at dt and dt / R see the same Brownian path.
    """

    base_seed: int
    path_index: int
    step: int = 0
    refinement: int = 1
    _cache: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.refinement < 1:
            raise ValueError("refinement must be >= 1")

    def _generator(self):
        key = (self.base_seed & _MASK64, self.path_index & _MASK64)
        if self._cache is None or self._cache[0] != key:
            bg = np.random.Philox(key=np.array(key, dtype=np.uint64))
            self._cache = (key, bg, bg.state)
        return self._cache[1], self._cache[2]

    def standard_normals(self, fine_step: int, n: int) -> np.ndarray:
        # reposition the counter instead of rebuilding the generator
        bg, state = self._generator()
        state["state"]["counter"][:] = (0, fine_step, 0, 0)
        state["buffer_pos"] = 4
        bg.state = state
        raw = bg.random_raw(n)
        u = (raw >> np.uint64(11)).astype(float) * 2.0**-53 + 2.0**-54
        return ndtri(u)

    def increments(self, step: int, dt: float, n: int) -> np.ndarray:
        """Increments for directions 0..n-1 over coarse step ``step``; pure."""
        R = self.refinement
        if R == 1:
            return math.sqrt(dt) * self.standard_normals(step, n)
        scale = math.sqrt(dt / R)
        out = np.zeros(n)
        for i in range(R):
            out += scale * self.standard_normals(step * R + i, n)
        return out


def sample_increments(src: NoiseSource, dt: float, J: int) -> np.ndarray:
    """J independent N(0, dt) draws for the source's current step; advances the counter."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    out = src.increments(src.step, dt, J)
    src.step += 1
    return out


def _default_basis(K: int) -> RealBasis:
    return RealBasis(K, 2 * K * K)


def _per_slot(values, basis: RealBasis, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        return np.full(len(basis), float(v))
    if len(v) > len(basis):
        raise ValueError(f"{name} has {len(v)} entries but only {len(basis)} basis slots are retained")
    return v


class DiffusionSpec:
    """Base class of the diffusion coefficients phi."""

    kind: ClassVar[str]

    def n_directions(self, basis: RealBasis) -> int:
        raise NotImplementedError

    def directions(self, basis: RealBasis) -> np.ndarray:
        """Universal indices of the Wiener directions this coefficient uses."""
        return basis.universal_index[: self.n_directions(basis)]

    def apply(self, c: np.ndarray, dW: np.ndarray, basis: RealBasis) -> np.ndarray:
        """phi(u) dW on coefficient arrays; leading batch axes of c and dW must match."""
        raise NotImplementedError

    def columns(self, c: np.ndarray, basis: RealBasis) -> np.ndarray:
        """phi(u) e_j for every direction j, shape (J, 2K+1, 2K+1)."""
        J = self.n_directions(basis)
        return np.stack([self.apply(c, np.eye(J)[j], basis) for j in range(J)]) if J else \
            np.zeros((0,) + c.shape)

    def growth_constant(self, basis: RealBasis, m: float) -> float:
        """kappa with ||phi(u)||_HS(H^2m) <= kappa (1 + ||u||_2m)."""
        raise NotImplementedError

    def lipschitz_constant(self) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> DiffusionSpec:
        kind = d["kind"]
        if kind == "additive_diagonal":
            return AdditiveDiagonal(tuple(d["sigma"]))
        if kind == "scalar_multiplicative":
            return ScalarMultiplicative(float(d["kappa"]))
        if kind == "diagonal_multiplicative":
            g = d["gamma"]
            return DiagonalMultiplicative(tuple(g) if isinstance(g, (list, tuple)) else float(g))
        raise ValueError(f"unknown diffusion kind {kind!r}")


@dataclass(frozen=True)
class AdditiveDiagonal(DiffusionSpec):
    """phi(u) e_j = sigma_j w_j, independent of u."""

    sigma: tuple[float, ...] = ()
    kind: ClassVar[str] = "additive_diagonal"

    @classmethod
    def on_shells(cls, shell_sigma: dict[int, float], shell_cutoff: float | None = None) -> AdditiveDiagonal:
        """Same amplitude on every slot of each listed shell (canonical slot order)."""
        top = max(shell_sigma) if shell_cutoff is None else shell_cutoff
        basis = RealBasis(int(math.isqrt(int(top))) + 1, top)
        sig = np.array([shell_sigma.get(int(s), 0.0) for s in basis.eigenvalues])
        nz = np.flatnonzero(sig)
        return cls(tuple(float(s) for s in sig[: nz[-1] + 1]) if len(nz) else ())

    def n_directions(self, basis):
        if len(self.sigma) > len(basis):
            raise ValueError(f"sigma has {len(self.sigma)} entries but only {len(basis)} slots are retained")
        return len(self.sigma)

    def apply(self, c, dW, basis):
        dW = np.asarray(dW, dtype=float)
        J = self.n_directions(basis)
        a = np.zeros(dW.shape[:-1] + (len(basis),))
        a[..., :J] = np.asarray(self.sigma) * dW
        return basis.from_real(a)

    def growth_constant(self, basis, m):
        lam = basis.eigenvalues[: len(self.sigma)]
        return float(np.sqrt(np.sum(np.square(self.sigma) * (1.0 + lam) ** (2 * m))))

    def lipschitz_constant(self):
        return 0.0

    def to_dict(self):
        return {"kind": self.kind, "sigma": list(self.sigma)}


@dataclass(frozen=True)
class ScalarMultiplicative(DiffusionSpec):
    """phi(u) = kappa u acting on the single direction e_0."""

    kappa: float = 0.0
    kind: ClassVar[str] = "scalar_multiplicative"

    def n_directions(self, basis):
        return 1

    def directions(self, basis):
        return np.array([0])

    def apply(self, c, dW, basis):
        dW = np.asarray(dW, dtype=float)
        return self.kappa * c * dW[..., 0][..., None, None]

    def growth_constant(self, basis, m):
        return abs(self.kappa)

    def lipschitz_constant(self):
        return abs(self.kappa)

    def to_dict(self):
        return {"kind": self.kind, "kappa": self.kappa}


@dataclass(frozen=True)
class DiagonalMultiplicative(DiffusionSpec):
    """phi(u) e_j = gamma_j (u, w_j) w_j; a scalar gamma applies to every retained slot."""

    gamma: tuple[float, ...] | float = 0.0
    kind: ClassVar[str] = "diagonal_multiplicative"

    def n_directions(self, basis):
        return len(_per_slot(self.gamma, basis, "gamma"))

    def apply(self, c, dW, basis):
        dW = np.asarray(dW, dtype=float)
        g = _per_slot(self.gamma, basis, "gamma")
        J = len(g)
        a = basis.to_real(c)
        a[..., :J] *= g * dW
        a[..., J:] = 0.0
        return basis.from_real(a)

    def growth_constant(self, basis, m):
        return self.lipschitz_constant()

    def lipschitz_constant(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        return float(np.max(np.abs(g), initial=0.0))

    def to_dict(self):
        g = self.gamma
        return {"kind": self.kind, "gamma": list(g) if isinstance(g, tuple) else g}


def diffusion_increment(u: SpectralField, spec: DiffusionSpec, dW: Sequence[float],
                        basis: RealBasis | None = None) -> SpectralField:
    """sum_j phi_j(u) dW_j."""
    basis = basis or _default_basis(u.K)
    dW = np.asarray(dW, dtype=float)
    J = spec.n_directions(basis)
    if dW.shape != (J,):
        raise ValueError(f"expected {J} Wiener increments, got shape {dW.shape}")
    return SpectralField(spec.apply(u.coeffs, dW, basis))


def _hs_from_columns(cols: np.ndarray, K: int, m: float) -> float:
    return math.sqrt(sum(sobolev_norm(SpectralField(col), 2 * m) ** 2 for col in cols))


def hilbert_schmidt_norm(u: SpectralField, spec: DiffusionSpec, m: float,
                         basis: RealBasis | None = None) -> float:
    """||phi(u)|| in L_2(U, H^{2m}): (sum_j ||phi(u) e_j||_{2m}^2)^(1/2)."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    basis = basis or _default_basis(u.K)
    return _hs_from_columns(spec.columns(u.coeffs, basis), u.K, m)


@dataclass
class LipschitzReport:
    ratio: float
    constant: float
    samples: int
    ratios: np.ndarray = field(repr=False)

    @property
    def certified(self) -> bool:
        return self.ratio <= self.constant + 1e-9


def verify_lipschitz(spec: DiffusionSpec, m: float, sample_count: int,
                     basis: RealBasis | None = None, K: int = 4, seed: int = 0) -> LipschitzReport:
    """Largest sampled ||phi(u) - phi(v)||_HS / ||u - v||_{2m} over random pairs."""
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    basis = basis or _default_basis(K)
    K = basis.K
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(sample_count):
        decay = rng.uniform(0.0, 2.0)
        u = random_field(K, rng, amplitude=rng.uniform(0.1, 3.0), decay=decay)
        v = random_field(K, rng, amplitude=rng.uniform(0.1, 3.0), decay=decay)
        diff = spec.columns(u.coeffs, basis) - spec.columns(v.coeffs, basis)
        # distance measured on the retained subspace the operator acts on
        du = sobolev_norm(u - v, 2 * m)
        ratios.append(_hs_from_columns(diff, K, m) / du)
    ratios = np.array(ratios)
    return LipschitzReport(float(ratios.max()), spec.lipschitz_constant(), sample_count, ratios)
