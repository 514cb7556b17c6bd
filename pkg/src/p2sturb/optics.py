"""Zernike modes, Kolmogorov modal covariance and the Fourier optics PSF oracle.

Conventions
-----------
* Modes use Noll's single index ``j >= 1`` and Noll's normalisation (unit
  variance over the disk). Even ``j`` carry ``cos(m theta)``, odd ``j`` carry
  ``sin(m theta)``; the signed azimuthal order is ``+m`` for cosine modes and
  ``-m`` for sine modes.
* Array axes are ``(row, col)``; aperture coordinate ``x`` runs along columns
  and ``y`` along rows.
* The pupil field is ``W * exp(-1j * phase)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial, gamma, pi

import numpy as np
from scipy import ndimage, optimize

from .errors import (DegenerateApertureError, DimensionError,
                     NumericalDomainError, UnsupportedModeError)

MAX_RADIAL_ORDER = 20


def noll_index(j: int) -> tuple[int, int]:
    """Return the radial and signed azimuthal order ``(n, m)`` of Noll mode ``j``."""
    if j < 1:
        raise UnsupportedModeError(f"Noll index must be >= 1 (got {j})")
    n = 0
    while (n + 1) * (n + 2) // 2 < j:
        n += 1
    k = j - n * (n + 1) // 2 - 1
    am = 2 * ((k + 1) // 2) if n % 2 == 0 else 2 * (k // 2) + 1
    if am == 0:
        return n, 0
    return n, am if j % 2 == 0 else -am


def noll_from_nm(n: int, m: int) -> int:
    """Inverse of :func:`noll_index`. The sign of ``m`` encodes cos/sin parity."""
    if n < 0 or abs(m) > n or (n - abs(m)) % 2:
        raise UnsupportedModeError(f"no Zernike mode with n={n}, m={m}")
    first = n * (n + 1) // 2 + 1
    for j in range(first, first + n + 1):
        if noll_index(j) == (n, m):
            return j
    raise UnsupportedModeError(f"no Zernike mode with n={n}, m={m}")


def radial_polynomial(n: int, m: int, rho):
    m = abs(m)
    rho = np.asarray(rho, dtype=float)
    out = np.zeros_like(rho)
    for k in range((n - m) // 2 + 1):
        c = (-1) ** k * factorial(n - k) / (
            factorial(k) * factorial((n + m) // 2 - k) * factorial((n - m) // 2 - k))
        out += c * rho ** (n - 2 * k)
    return out


def zernike_polynomial(j: int, rho, theta):
    """Analytic Noll-normalised Zernike polynomial at polar coordinates.

    No masking is applied; callers decide what happens outside the disk.
    """
    n, m = noll_index(j)
    if n > MAX_RADIAL_ORDER:
        raise UnsupportedModeError(
            f"mode {j} has radial order {n} > supported {MAX_RADIAL_ORDER}")
    r = radial_polynomial(n, m, rho)
    if m == 0:
        return np.sqrt(n + 1) * r
    ang = np.cos(m * theta) if m > 0 else np.sin(-m * theta)
    return np.sqrt(2 * (n + 1)) * r * ang


@dataclass(frozen=True, eq=False)
class ApertureGrid:
    """Circular pupil sampled on a ``P x P`` grid spanning the full diameter."""

    resolution: int
    mask: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, resolution: int) -> "ApertureGrid":
        return _aperture_grid(int(resolution))

    @property
    def rho(self):
        return np.hypot(self.x, self.y)

    @property
    def theta(self):
        return np.arctan2(self.y, self.x)

    @property
    def n_inside(self) -> int:
        return int(self.mask.sum())


@lru_cache(maxsize=8)
def _aperture_grid(p: int) -> ApertureGrid:
    c = (np.arange(p) - (p - 1) / 2) / (p / 2)
    y, x = np.meshgrid(c, c, indexing="ij")
    mask = np.hypot(x, y) <= 1.0
    for a in (mask, x, y):
        a.setflags(write=False)
    return ApertureGrid(p, mask, x, y)


@dataclass(frozen=True, eq=False)
class ZernikeBasisSet:
    """Discrete Zernike modes ``Z_1..Z_K`` on an aperture grid.

    ``modes[j - 1]`` holds mode ``j``. The sampled analytic polynomials are
    Gram-Schmidt orthonormalised over the mask in Noll order; the correction
    is of the order of the pixelation error of the disk edge.
    """

    count: int
    grid: ApertureGrid = field(repr=False)
    modes: np.ndarray = field(repr=False)

    @property
    def index_map(self):
        return {j: noll_index(j) for j in range(1, self.count + 1)}

    @classmethod
    def create(cls, grid: ApertureGrid, count: int) -> "ZernikeBasisSet":
        full = _orthonormal_modes(grid.resolution, count)
        return cls(count, grid, full)

    def gram(self) -> np.ndarray:
        v = self.modes[:, self.grid.mask]
        return v @ v.T / self.grid.n_inside

    def project(self, phase: np.ndarray) -> np.ndarray:
        """Least-squares Zernike coefficients of ``phase`` over the mask."""
        v = self.modes[:, self.grid.mask]
        return v @ phase[self.grid.mask] / self.grid.n_inside


@lru_cache(maxsize=8)
def _orthonormal_modes(p: int, count: int) -> np.ndarray:
    grid = _aperture_grid(p)
    if grid.n_inside == 0:
        raise DegenerateApertureError("aperture mask is empty")
    rho, theta = grid.rho[grid.mask], grid.theta[grid.mask]
    raw = np.array([zernike_polynomial(j, rho, theta) for j in range(1, count + 1)])
    n = grid.n_inside
    # modified Gram-Schmidt, Noll order, unit mean-square over the mask
    ortho = np.empty_like(raw)
    for i in range(count):
        v = raw[i].copy()
        for k in range(i):
            v -= (ortho[k] @ v / n) * ortho[k]
        ortho[i] = v / np.sqrt(v @ v / n)
        if np.dot(ortho[i], raw[i]) < 0:
            ortho[i] = -ortho[i]
    modes = np.zeros((count, p, p))
    modes[:, grid.mask] = ortho
    modes.setflags(write=False)
    return modes


def zernike_eval(j: int, grid: ApertureGrid, count: int | None = None) -> np.ndarray:
    """Sampled mode ``j`` on ``grid``, zero outside the mask.

    The returned field belongs to the discrete orthonormal set built up to
    ``count`` modes (default ``j``); lower modes do not depend on ``count``.
    """
    n, _ = noll_index(j)
    if n > MAX_RADIAL_ORDER:
        raise UnsupportedModeError(
            f"mode {j} has radial order {n} > supported {MAX_RADIAL_ORDER}")
    count = j if count is None else max(count, j)
    return np.array(_orthonormal_modes(grid.resolution, count)[j - 1])


# ---------------------------------------------------------------------------
# Kolmogorov modal covariance

# Prefactor of the Gamma-function covariance, derived from the Kolmogorov
# phase spectrum 0.0229 r0^(-5/3) f^(-11/3) (f in cycles/m):
# Gamma(11/6)^2 [(24/5) Gamma(6/5)]^(5/6) Gamma(14/3) / (2^(8/3) pi) ~= 2.2461
NOLL_CONSTANT = (gamma(11 / 6) ** 2 * ((24 / 5) * gamma(6 / 5)) ** (5 / 6) * gamma(14 / 3)
                 / (2 ** (8 / 3) * pi))
# Same spectrum written for the phase PSD in cycles per metre.
KOLMOGOROV_PSD_CONSTANT = gamma(11 / 6) ** 2 / (2 * pi ** (11 / 3)) * ((24 / 5) * gamma(6 / 5)) ** (5 / 6)


@dataclass(frozen=True, eq=False)
class ModalCovariance:
    """``E[alpha_i alpha_j]`` in rad^2; index ``[i-1, j-1]`` for Noll modes i, j."""

    matrix: np.ndarray = field(repr=False)
    d_over_r0_ref: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def scaled(self, d_over_r0: float) -> "ModalCovariance":
        f = (d_over_r0 / self.d_over_r0_ref) ** (5 / 3)
        return ModalCovariance(self.matrix * f, d_over_r0)

    def sqrt_factor(self) -> np.ndarray:
        return psd_sqrt(self.matrix)


def noll_pair_coefficient(i: int, j: int) -> float:
    """Covariance of Noll modes ``i`` and ``j`` at ``D/r0 = 1`` (rad^2)."""
    ni, mi = noll_index(i)
    nj, mj = noll_index(j)
    if i == 1 or j == 1:
        return 0.0
    if abs(mi) != abs(mj):
        return 0.0
    if mi != 0 and (i - j) % 2:
        return 0.0
    m = abs(mi)
    num = gamma((ni + nj - 5 / 3) / 2)
    den = (gamma((ni - nj + 17 / 3) / 2) * gamma((nj - ni + 17 / 3) / 2)
           * gamma((ni + nj + 23 / 3) / 2))
    sign = (-1) ** ((ni + nj - 2 * m) // 2)
    value = NOLL_CONSTANT * sign * np.sqrt((ni + 1) * (nj + 1)) * num / den
    if not np.isfinite(value):
        raise NumericalDomainError(
            f"non-finite Gamma evaluation for mode pair ({i}, {j})", pair=(i, j))
    return float(value)


@lru_cache(maxsize=16)
def _noll_unit(k: int) -> np.ndarray:
    r = np.zeros((k, k))
    for i in range(2, k + 1):
        for j in range(i, k + 1):
            r[i - 1, j - 1] = r[j - 1, i - 1] = noll_pair_coefficient(i, j)
    r.setflags(write=False)
    return r


def noll_covariance(k: int, d_over_r0: float) -> ModalCovariance:
    """Noll's Kolmogorov covariance of the first ``k`` Zernike coefficients.

    Piston (row/column 0) is set to zero: it does not change the PSF.
    """
    if k < 4:
        raise DimensionError(f"need at least 4 modes (got {k})")
    if not d_over_r0 > 0:
        raise DimensionError(f"d_over_r0 must be positive (got {d_over_r0})")
    return ModalCovariance(_noll_unit(k) * d_over_r0 ** (5 / 3), float(d_over_r0))


def psd_sqrt(c: np.ndarray) -> np.ndarray:
    """Symmetric square-root factor ``F`` with ``F @ F.T == c`` (negative eigenvalues clipped)."""
    c = 0.5 * (c + c.T)
    w, v = np.linalg.eigh(c)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


# ---------------------------------------------------------------------------
# phase and PSF

def phase_from_coeffs(alpha, basis: ZernikeBasisSet) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape[-1] != basis.count:
        raise DimensionError(
            f"coefficient vector has length {alpha.shape[-1]}, basis has {basis.count} modes")
    return np.tensordot(alpha, basis.modes, axes=([-1], [0]))


@dataclass(frozen=True, eq=False)
class Psf:
    values: np.ndarray
    pixel_scale: float = 1.0

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def centroid(self):
        return psf_centroid(self.values)


@lru_cache(maxsize=32)
def _mft_matrix(p: int, size: int, oversampling: float, offset: float = 0.0) -> np.ndarray:
    """Matrix mapping pupil samples to focal-plane samples on a ``size`` grid.

    With integer ``oversampling`` this reproduces a zero padded DFT of length
    ``oversampling * p`` cropped to its central ``size`` samples.
    """
    u = np.arange(size) - (size - 1) / 2 + offset
    x = np.arange(p) - (p - 1) / 2
    a = np.exp(-2j * np.pi * np.outer(u, x) / (oversampling * p))
    a.setflags(write=False)
    return a


def psf_batch(phases, grid: ApertureGrid, size: int, oversampling: float = 4.0,
              normalize: bool = True) -> np.ndarray:
    """Vectorised PSF oracle: ``|F{W exp(-i phase)}|^2`` for a stack of phases."""
    if grid.n_inside == 0:
        raise DegenerateApertureError("aperture mask is empty")
    if size % 2 == 0:
        raise DimensionError(f"PSF size must be odd (got {size})")
    if size > int(round(oversampling * grid.resolution)):
        raise DimensionError(
            f"PSF size {size} exceeds the embedding size {oversampling * grid.resolution:g}")
    phases = np.asarray(phases, dtype=float)
    single = phases.ndim == 2
    if single:
        phases = phases[None]
    field_ = np.where(grid.mask, np.exp(-1j * phases), 0.0)
    a = _mft_matrix(grid.resolution, size, float(oversampling))
    amp = a @ field_ @ a.T
    h = amp.real ** 2 + amp.imag ** 2
    if normalize:
        h /= h.sum(axis=(-2, -1), keepdims=True)
    return h[0] if single else h


def psf_from_phase(phase, grid: ApertureGrid, size: int, oversampling: float = 4.0,
                   pixel_pitch: float = 1.0) -> Psf:
    """Incoherent PSF of one pupil phase, cropped to ``size x size`` and unit sum."""
    phase = np.asarray(phase, dtype=float)
    if phase.shape != grid.mask.shape:
        raise DimensionError(f"phase shape {phase.shape} does not match grid {grid.mask.shape}")
    return Psf(psf_batch(phase, grid, size, oversampling), pixel_pitch)


def psf_centroid(h: np.ndarray) -> np.ndarray:
    """Intensity centroid ``(row, col)`` relative to the array centre."""
    h = np.asarray(h)
    c = (np.arange(h.shape[-1]) - (h.shape[-1] - 1) / 2)
    r = (np.arange(h.shape[-2]) - (h.shape[-2] - 1) / 2)
    tot = h.sum(axis=(-2, -1))
    cy = np.einsum("...ij,i->...", h, r) / tot
    cx = np.einsum("...ij,j->...", h, c) / tot
    return np.stack([cy, cx], axis=-1)


def _shifted(vals, shift):
    out = ndimage.shift(vals, -shift, order=1, mode="grid-constant", cval=0.0)
    np.clip(out, 0.0, None, out=out)
    return out / out.sum()


def center_psf(h, tol: float = 1e-4, max_iter: int = 50):
    """Translate a PSF so its centroid sits on the grid centre.

    Returns the centred, renormalised PSF and the removed shift ``(row, col)``
    in pixels. Accepts a :class:`Psf` or a bare array and returns the same kind.

    Energy crossing the crop boundary makes the plain fixed-point iteration
    oscillate for wide PSFs, so the shift is found by a root search on the
    centroid of the resampled PSF.
    """
    is_psf = isinstance(h, Psf)
    vals = np.asarray(h.values if is_psf else h, dtype=float)
    c0 = psf_centroid(vals)
    if np.all(np.abs(c0) < tol):
        out, total = vals.copy(), np.zeros(2)
    else:
        sol = optimize.root(lambda sh: psf_centroid(_shifted(vals, sh)), c0, method="hybr",
                            options={"xtol": 1e-10, "maxfev": max_iter * 3})
        total = sol.x
        out = _shifted(vals, total)
        if not np.all(np.abs(psf_centroid(out)) < 10 * tol):
            # fall back to damped fixed-point steps from the best point found
            for _ in range(max_iter):
                c = psf_centroid(out)
                if np.all(np.abs(c) < tol):
                    break
                total = total + 0.5 * c
                out = _shifted(vals, total)
    if is_psf:
        return Psf(out, h.pixel_scale), total
    return out, total


def diffraction_limited_psf(grid: ApertureGrid, size: int, oversampling: float = 4.0) -> np.ndarray:
    return psf_batch(np.zeros(grid.mask.shape), grid, size, oversampling)


def tilt_shift_per_radian(grid: ApertureGrid, oversampling: float) -> float:
    """PSF displacement in pixels per radian of tilt coefficient.

    A phase ``g * k`` linear in the pupil sample index ``k`` moves the
    focal-plane peak to ``u = -g q P / (2 pi)``; ``g`` is read off the sampled
    tilt mode so the constant matches the oracle exactly.
    """
    z2 = _orthonormal_modes(grid.resolution, 2)[1]
    mid = grid.resolution // 2
    slope = z2[mid, mid] - z2[mid, mid - 1]
    return float(-slope * oversampling * grid.resolution / (2 * np.pi))
