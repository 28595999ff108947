"""Drift of the modified Swift-Hohenberg equation and its smooth norm cut-off.

The equation is

    du + [Laplacian^2 u + 2 Laplacian u + a u + b |grad u|^2 + u^3] dt = phi(u) dW,

equivalently ``du + [A^2 u + f(u)] dt = phi(u) dW`` with A = -Laplacian + 1 and
``f(u) = (a + 3) u - 4 A u + b |grad u|^2 + u^3``.  Drift functions here
return the negated bracket, i.e. the right-hand side of du/dt.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import (
    ModelParams,
    SpectralField,
    SpectralGrid,
    coeffs_from_physical,
    physical_from_coeffs,
    sobolev_norm,
    wavenumbers,
)


@dataclass(frozen=True)
class CutoffConfig:
    """Quintic smoothstep cut-off: 1 on [0, N], 0 beyond N + 1."""

    N: float

    def __post_init__(self):
        if not self.N > 0:
            raise ValueError(f"cut-off threshold N must be positive, got {self.N}")


@dataclass(frozen=True)
class DriftToggles:
    include_gradient_term: bool = True
    include_cubic_term: bool = True

    @property
    def any(self) -> bool:
        return self.include_gradient_term or self.include_cubic_term


FULL_DRIFT = DriftToggles()
LINEAR_ONLY = DriftToggles(False, False)


def cutoff_factor(r, cfg: CutoffConfig | None):
    """delta_N(r) = 1 - s^3 (10 - 15 s + 6 s^2), s = clip(r - N, 0, 1).

    Exactly 1.0 for r <= N.  Accepts scalars or arrays; ``cfg=None`` means no cut-off.
    """
    if cfg is None:
        return np.ones(np.shape(r)) if np.ndim(r) else 1.0
    s = np.clip(np.asarray(r, dtype=float) - cfg.N, 0.0, 1.0)
    out = 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    return out if np.ndim(out) else float(out)


class Nonlinearity:
    """Dealiased pseudo-spectral evaluation of b |grad u|^2 + u^3.

    Works on centred coefficient arrays with arbitrary leading batch axes.
    """

    def __init__(self, grid: SpectralGrid, b: float, toggles: DriftToggles = FULL_DRIFT):
        self.grid = grid
        self.b = float(b)
        self.toggles = toggles
        k, l = wavenumbers(grid.K)
        self._ik = 1j * k
        self._il = 1j * l

    def __call__(self, c: np.ndarray) -> np.ndarray:
        t = self.toggles
        if not t.any:
            return np.zeros_like(c)
        parts = []
        if t.include_cubic_term:
            parts.append(c)
        grad = t.include_gradient_term and self.b != 0.0
        if grad:
            parts += [self._ik * c, self._il * c]
        phys = physical_from_coeffs(np.stack(parts, axis=-3), self.grid.M_pad)
        i = 0
        prod = 0.0
        if t.include_cubic_term:
            u = phys[..., 0, :, :]
            prod = u * u * u
            i = 1
        if grad:
            ux, uy = phys[..., i, :, :], phys[..., i + 1, :, :]
            prod = prod + self.b * (ux * ux + uy * uy)
        return coeffs_from_physical(prod, self.grid.K)


def nonlinear_terms(u: SpectralField, params: ModelParams, grid: SpectralGrid,
                    toggles: DriftToggles = FULL_DRIFT) -> SpectralField:
    """Spectral coefficients of b |grad u|^2 + u^3, truncated to the grid box."""
    if u.K != grid.K:
        raise ValueError(f"field has K={u.K} but grid has K={grid.K}")
    return SpectralField(Nonlinearity(grid, params.b, toggles)(u.coeffs))


def f_coeffs(c: np.ndarray, params: ModelParams, A: np.ndarray, nonlin: np.ndarray) -> np.ndarray:
    """f(u) = (a+3) u - 4 A u + N(u) on coefficient arrays."""
    return (params.a + 3.0) * c - 4.0 * A * c + nonlin


def drift_abstract(u: SpectralField, params: ModelParams, grid: SpectralGrid | None = None,
                   toggles: DriftToggles = FULL_DRIFT) -> SpectralField:
    """-A^2 u - f(u)."""
    grid = grid or SpectralGrid(u.K)
    c = u.coeffs
    A = grid.A
    nl = nonlinear_terms(u, params, grid, toggles).coeffs
    return SpectralField(-(A * A) * c - f_coeffs(c, params, A, nl))


def drift_raw(u: SpectralField, params: ModelParams, grid: SpectralGrid | None = None,
              toggles: DriftToggles = FULL_DRIFT) -> SpectralField:
    """-(Laplacian^2 u + 2 Laplacian u + a u + b |grad u|^2 + u^3), built from the Laplacian symbol."""
    grid = grid or SpectralGrid(u.K)
    c = u.coeffs
    k, l = wavenumbers(u.K)
    lap = -(k * k + l * l).astype(float)
    nl = nonlinear_terms(u, params, grid, toggles).coeffs
    return SpectralField(-(lap * (lap * c) + 2.0 * lap * c + params.a * c + nl))


def cutoff_drift(u: SpectralField, params: ModelParams, cfg: CutoffConfig | None,
                 grid: SpectralGrid | None = None,
                 toggles: DriftToggles = FULL_DRIFT) -> tuple[SpectralField, float]:
    """-A^2 u - delta_N(||u||_2) f(u), together with the factor delta_N(||u||_2).

    The factor is returned because the noise term is multiplied by it as well.
    """
    grid = grid or SpectralGrid(u.K)
    delta = cutoff_factor(sobolev_norm(u, 2.0), cfg)
    c = u.coeffs
    A = grid.A
    nl = nonlinear_terms(u, params, grid, toggles).coeffs
    return SpectralField(-(A * A) * c - delta * f_coeffs(c, params, A, nl)), delta
