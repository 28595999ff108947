"""Fourier machinery on the 2pi-periodic torus.

Fields are stored as centred complex coefficient arrays ``c[k + K, l + K]``
for ``-K <= k, l <= K`` with

    u(x, y) = sum_{k,l} c[k, l] exp(i (k x + l y)),

so that ``||u||^2 = (2 pi)^2 sum |c|^2``.  Axis 0 carries the x wavenumber k,
axis 1 the y wavenumber l.  Real fields obey ``c[-k, -l] = conj(c[k, l])``.

The orthonormal real eigenbasis used for noise directions and energy
bookkeeping is

    w_0 = 1 / (2 pi),   cos(k x + l y) / (sqrt(2) pi),   sin(k x + l y) / (sqrt(2) pi)

over the half plane ``k > 0`` or ``k = 0, l > 0``, ordered by shell, then
k, then l, then cos before sin.  That ordering does not depend on the box
size, which keeps noise directions paired across Galerkin levels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * math.pi
# |c|^2 -> squared L2 norm
L2_WEIGHT = TWO_PI**2
_COS_SCALE = 2.0 * math.sqrt(2.0) * math.pi


def eigenvalue(k: int, l: int) -> int:
    """Eigenvalue of -Laplacian for the mode (k, l)."""
    return k * k + l * l


def wavenumbers(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Broadcastable centred wavenumber arrays (k along axis 0, l along axis 1)."""
    r = np.arange(-K, K + 1)
    return r[:, None], r[None, :]


def eigenvalue_grid(K: int) -> np.ndarray:
    k, l = wavenumbers(K)
    return (k * k + l * l).astype(float)


@dataclass(frozen=True)
class ModelParams:
    a: float
    b: float

    @property
    def global_regime(self) -> bool:
        """True when |b| < 4, the regime where global solutions are known to exist."""
        return abs(self.b) < 4.0


@dataclass(frozen=True)
class SpectralGrid:
    """Retained box ``|k|, |l| <= K`` plus the physical grids used for transforms."""

    K: int
    M: int | None = None
    dealias_pad_factor: Fraction | float | int | str = 2

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be nonnegative, got {self.K}")
        if self.M is None:
            # smallest even M >= 2K+2 whose doubled size is FFT-friendly
            M = 2 * self.K + 2
            while sfft.next_fast_len(2 * M, real=True) != 2 * M:
                M += 2
            object.__setattr__(self, "M", M)
        if self.M < 2 * self.K + 1:
            raise ValueError(f"M={self.M} cannot represent K={self.K}; need M >= 2K+1")
        pad = Fraction(self.dealias_pad_factor).limit_denominator(1000)
        if pad < 2:
            raise ValueError(f"dealias_pad_factor must be >= 2 for cubic products, got {pad}")
        object.__setattr__(self, "dealias_pad_factor", pad)

    @property
    def n(self) -> int:
        return 2 * self.K + 1

    @property
    def M_pad(self) -> int:
        mp = math.ceil(self.dealias_pad_factor * self.M)
        return mp + (mp % 2)

    @cached_property
    def lam(self) -> np.ndarray:
        return eigenvalue_grid(self.K)

    @cached_property
    def A(self) -> np.ndarray:
        """Symbol of A = -Laplacian + 1."""
        return 1.0 + self.lam

    def points(self, padded: bool = False) -> tuple[np.ndarray, np.ndarray]:
        m = self.M_pad if padded else self.M
        x = TWO_PI * np.arange(m) / m
        return np.meshgrid(x, x, indexing="ij")


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Immutable real field on the torus given by its centred Fourier coefficients."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] % 2 == 0:
            raise ValueError(f"coefficients must be a (2K+1, 2K+1) array, got shape {c.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def K(self) -> int:
        return (self.coeffs.shape[0] - 1) // 2

    @classmethod
    def zeros(cls, K: int) -> SpectralField:
        return cls(np.zeros((2 * K + 1, 2 * K + 1), complex))

    @classmethod
    def constant(cls, K: int, value: float) -> SpectralField:
        c = np.zeros((2 * K + 1, 2 * K + 1), complex)
        c[K, K] = value
        return cls(c)

    @classmethod
    def cosine(cls, K: int, k: int, l: int, amplitude: float = 1.0) -> SpectralField:
        """``amplitude * cos(k x + l y)``."""
        c = np.zeros((2 * K + 1, 2 * K + 1), complex)
        if k == 0 and l == 0:
            c[K, K] = amplitude
        else:
            c[K + k, K + l] += amplitude / 2
            c[K - k, K - l] += amplitude / 2
        return cls(c)

    @classmethod
    def sine(cls, K: int, k: int, l: int, amplitude: float = 1.0) -> SpectralField:
        """``amplitude * sin(k x + l y)``."""
        c = np.zeros((2 * K + 1, 2 * K + 1), complex)
        c[K + k, K + l] += -0.5j * amplitude
        c[K - k, K - l] += 0.5j * amplitude
        return cls(c)

    def hermitian_defect(self) -> float:
        c = self.coeffs
        return float(np.max(np.abs(c - np.conj(c[::-1, ::-1])), initial=0.0))

    def is_hermitian(self, tol: float = 0.0) -> bool:
        return self.hermitian_defect() <= tol

    def norm(self) -> float:
        return sobolev_norm(self, 0.0)

    def __add__(self, other: SpectralField) -> SpectralField:
        return SpectralField(self.coeffs + other.coeffs)

    def __sub__(self, other: SpectralField) -> SpectralField:
        return SpectralField(self.coeffs - other.coeffs)

    def __neg__(self) -> SpectralField:
        return SpectralField(-self.coeffs)

    def __mul__(self, scalar: float) -> SpectralField:
        return SpectralField(self.coeffs * scalar)

    __rmul__ = __mul__


def hermitian_part(c: np.ndarray) -> np.ndarray:
    """Project coefficient arrays (leading batch axes allowed) onto real fields."""
    return 0.5 * (c + np.conj(c[..., ::-1, ::-1]))


def random_field(K: int, rng: np.random.Generator, amplitude: float = 1.0,
                 decay: float = 0.0) -> SpectralField:
    """Gaussian random real field with coefficient scale ``amplitude * (1 + lam)^(-decay)``."""
    shape = (2 * K + 1, 2 * K + 1)
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    z *= amplitude * (1.0 + eigenvalue_grid(K)) ** (-decay)
    return SpectralField(hermitian_part(z))


def apply_fractional_power(u: SpectralField, alpha: float) -> SpectralField:
    """A^alpha u with A = -Laplacian + 1."""
    if alpha == 0:
        return u
    return SpectralField(u.coeffs * (1.0 + eigenvalue_grid(u.K)) ** alpha)


def sobolev_weights(K: int, alpha: float) -> np.ndarray:
    return L2_WEIGHT * (1.0 + eigenvalue_grid(K)) ** alpha


def sobolev_norm(u: SpectralField, alpha: float) -> float:
    """(sum (1+lam)^alpha |a|^2)^(1/2) in orthonormal-basis coefficients."""
    c = u.coeffs
    return float(np.sqrt(np.sum(sobolev_weights(u.K, alpha) * (c.real**2 + c.imag**2))))


def galerkin_project(u: SpectralField, shell_cutoff: float) -> SpectralField:
    """Keep whole shells k^2 + l^2 <= shell_cutoff."""
    mask = eigenvalue_grid(u.K) <= shell_cutoff
    return SpectralField(np.where(mask, u.coeffs, 0.0))


# -- transforms ------------------------------------------------------------

def embed_half(c: np.ndarray, m: int) -> np.ndarray:
    """Centred coefficients -> rfft2 half spectrum on an m x m grid (batch axes allowed)."""
    K = (c.shape[-1] - 1) // 2
    out = np.zeros(c.shape[:-2] + (m, m // 2 + 1), complex)
    out[..., : K + 1, : K + 1] = c[..., K:, K:]
    if K:
        out[..., m - K:, : K + 1] = c[..., :K, K:]
    return out


def _centred_from_right(right: np.ndarray, K: int) -> np.ndarray:
    out = np.empty(right.shape[:-2] + (2 * K + 1, 2 * K + 1), complex)
    out[..., K:] = right
    out[..., :K] = np.conj(right[..., ::-1, K:0:-1])
    return hermitian_part(out)


def extract_half(h: np.ndarray, K: int) -> np.ndarray:
    """rfft2 half spectrum -> centred Hermitian coefficients truncated to |k|,|l| <= K."""
    m = h.shape[-2]
    right = np.concatenate([h[..., m - K:, : K + 1], h[..., : K + 1, : K + 1]], axis=-2)
    return _centred_from_right(right, K)


def physical_from_coeffs(c: np.ndarray, m: int) -> np.ndarray:
    """Inverse transform that skips the identically zero rows and columns of the padded spectrum."""
    K = (c.shape[-1] - 1) // 2
    cols = np.zeros(c.shape[:-2] + (m, K + 1), complex)
    cols[..., : K + 1, :] = c[..., K:, K:]
    if K:
        cols[..., m - K:, :] = c[..., :K, K:]
    half = np.zeros(c.shape[:-2] + (m, m // 2 + 1), complex)
    half[..., : K + 1] = sfft.ifft(cols, axis=-2, norm="forward")
    return sfft.irfft(half, n=m, axis=-1, norm="forward")


def coeffs_from_physical(f: np.ndarray, K: int) -> np.ndarray:
    """Forward transform keeping only the columns 0 <= l <= K before the second pass."""
    m = f.shape[-2]
    cols = sfft.fft(sfft.rfft(f, axis=-1, norm="forward")[..., : K + 1], axis=-2, norm="forward")
    right = np.concatenate([cols[..., m - K:, :], cols[..., : K + 1, :]], axis=-2)
    return _centred_from_right(right, K)


def to_physical(u: SpectralField, grid: SpectralGrid, padded: bool = False) -> np.ndarray:
    """Real values of u on the (M x M) or padded physical grid."""
    if u.K != grid.K:
        raise ValueError(f"field has K={u.K} but grid has K={grid.K}")
    return physical_from_coeffs(u.coeffs, grid.M_pad if padded else grid.M)


def to_spectral(f: np.ndarray, grid: SpectralGrid) -> SpectralField:
    """Inverse of :func:`to_physical`; accepts the plain or padded grid."""
    f = np.asarray(f, dtype=float)
    if f.shape not in ((grid.M, grid.M), (grid.M_pad, grid.M_pad)):
        raise ValueError(f"physical array of shape {f.shape} does not match M={grid.M} "
                         f"or M_pad={grid.M_pad}")
    return SpectralField(coeffs_from_physical(f, grid.K))


def physical_l2_norm(f: np.ndarray) -> float:
    """Quadrature of the L2 norm over [0, 2pi]^2 (exact for resolved trig polynomials)."""
    m = f.shape[0]
    return float(math.sqrt(np.sum(f * f)) * TWO_PI / m)


# -- real orthonormal basis -------------------------------------------------

def canonical_modes(shell_cutoff: float) -> list[tuple[int, int]]:
    """Half-plane modes with k^2 + l^2 <= shell_cutoff in canonical order, (0, 0) first."""
    r = int(math.isqrt(int(math.floor(shell_cutoff)))) if shell_cutoff >= 0 else -1
    modes = []
    for k in range(0, r + 1):
        for l in range(-r, r + 1):
            if k == 0 and l < 0:
                continue
            if k * k + l * l <= shell_cutoff:
                modes.append((k, l))
    modes.sort(key=lambda kl: (kl[0] ** 2 + kl[1] ** 2, kl[0], kl[1]))
    return modes


@dataclass(frozen=True)
class RealBasis:
    """Orthonormal real eigenfunctions w_j retained by a box K and shell cutoff.

    Slot 0 is the constant; every other retained half-plane mode contributes
    a cos slot immediately followed by its sin slot.  ``universal_index[j]``
    is the position of slot j in the box-independent canonical enumeration;
    noise streams are keyed by it.
    """

    K: int
    shell_cutoff: float
    k: np.ndarray = field(init=False, repr=False)
    l: np.ndarray = field(init=False, repr=False)
    kind: np.ndarray = field(init=False, repr=False)  # 0 const, 1 cos, 2 sin
    universal_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ks, ls, kinds, uni = [], [], [], []
        pos = 0
        for k, l in canonical_modes(self.shell_cutoff):
            slots = (0,) if (k, l) == (0, 0) else (1, 2)
            inside = abs(k) <= self.K and abs(l) <= self.K
            for s in slots:
                if inside:
                    ks.append(k)
                    ls.append(l)
                    kinds.append(s)
                    uni.append(pos)
                pos += 1
        object.__setattr__(self, "k", np.array(ks, dtype=int))
        object.__setattr__(self, "l", np.array(ls, dtype=int))
        object.__setattr__(self, "kind", np.array(kinds, dtype=int))
        object.__setattr__(self, "universal_index", np.array(uni, dtype=int))

    def __len__(self) -> int:
        return len(self.k)

    @property
    def eigenvalues(self) -> np.ndarray:
        return (self.k**2 + self.l**2).astype(float)

    @cached_property
    def _layout(self):
        cos = np.flatnonzero(self.kind == 1)
        n = 2 * self.K + 1
        mk, ml = self.k[cos], self.l[cos]
        return {
            "has_const": bool(len(self) and self.kind[0] == 0),
            "cos": cos,
            "pos": (mk + self.K) * n + (ml + self.K),
            "neg": (self.K - mk) * n + (self.K - ml),
        }

    def to_real(self, c: np.ndarray) -> np.ndarray:
        """Orthonormal coefficients a_j = (u, w_j); batch axes allowed."""
        lay = self._layout
        flat = c.reshape(c.shape[:-2] + (-1,))
        a = np.empty(c.shape[:-2] + (len(self),))
        v = flat[..., lay["pos"]]
        a[..., lay["cos"]] = _COS_SCALE * v.real
        a[..., lay["cos"] + 1] = -_COS_SCALE * v.imag
        if lay["has_const"]:
            n = c.shape[-1]
            a[..., 0] = TWO_PI * flat[..., (n * n) // 2].real
        return a

    def from_real(self, a: np.ndarray) -> np.ndarray:
        """Coefficient array of sum_j a_j w_j; batch axes allowed."""
        a = np.asarray(a, dtype=float)
        lay = self._layout
        n = 2 * self.K + 1
        flat = np.zeros(a.shape[:-1] + (n * n,), complex)
        v = (a[..., lay["cos"]] - 1j * a[..., lay["cos"] + 1]) / _COS_SCALE
        flat[..., lay["pos"]] = v
        flat[..., lay["neg"]] = np.conj(v)
        if lay["has_const"]:
            flat[..., (n * n) // 2] = a[..., 0] / TWO_PI
        return flat.reshape(a.shape[:-1] + (n, n))

    def basis_function(self, j: int) -> SpectralField:
        e = np.zeros(len(self))
        e[j] = 1.0
        return SpectralField(self.from_real(e))

    def shell_slots(self, shell: int) -> np.ndarray:
        return np.flatnonzero(self.k**2 + self.l**2 == shell)


def shell_inventory(K: int, shell_cutoff: float) -> dict[int, int]:
    """Number of complex modes (k, l) inside the box per retained shell."""
    lam = eigenvalue_grid(K).astype(int)
    shells, counts = np.unique(lam[lam <= shell_cutoff], return_counts=True)
    return {int(s): int(n) for s, n in zip(shells, counts)}


# -- raw dumps --------------------------------------------------------------

def write_field_dump(path: str | Path, u: SpectralField, grid: SpectralGrid,
                     time: float, seed: int | None) -> tuple[Path, Path]:
    """Physical grid as row-major little-endian float64 plus a JSON sidecar."""
    path = Path(path)
    f = to_physical(u, grid)
    f.astype("<f8").tofile(path)
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps({"K": grid.K, "M": grid.M, "time": time, "seed": seed}))
    return path, side


def read_field_dump(path: str | Path) -> tuple[SpectralField, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    f = np.fromfile(path, dtype="<f8").reshape(meta["M"], meta["M"])
    grid = SpectralGrid(meta["K"], meta["M"])
    return to_spectral(f, grid), meta
