"""Spatial correlation of Zernike coefficients across the field of view.

Two apertures looking at object points separated by an angle ``theta`` share
turbulence near the pupil and decorrelate towards the object. For a point
source at range ``L`` and uniform turbulence strength along the path, the
layer at fractional distance ``t`` (0 at the pupil, 1 at the object) is
crossed by two cones of radius ``R (1 - t)`` whose centres are
``theta L t`` apart. Each layer contributes Kolmogorov statistics weighted by
``(1 - t)^(5/3)``, which gives

    cov_ij(theta) = (D/r0)^(5/3) int_0^1 (8/3)(1-t)^(5/3) c_ij(s(t), psi) dt,
    s(t) = |theta| L t / (R (1 - t)),

with ``c_ij`` the single-layer covariance of unit-radius apertures displaced by
``s`` in direction ``psi``. The layer covariance is a sum of Hankel-type
integrals over spatial frequency that are tabulated once and interpolated.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate, special
from scipy.interpolate import CubicSpline

from .config import OpticalConfig
from .errors import (ConfigError, DimensionError, FormatError, MemoryBudgetError,
                     QuadratureError, UnsupportedVersionError)
from .optics import KOLMOGOROV_PSD_CONSTANT, noll_covariance, noll_index, psd_sqrt

log = logging.getLogger(__name__)

J_CUTOFF = 10
MAX_ANCHORS = 64 * 64
DENSE_MAX_G = 16
DEFAULT_MEMORY_BUDGET = 2 * 1024 ** 3

S_MAX = 100.0
_S_NODES = np.concatenate([[0.0], np.geomspace(1e-3, S_MAX, 151)])
_K_END = 40.0
_GL16 = np.polynomial.legendre.leggauss(16)
_GL24 = np.polynomial.legendre.leggauss(24)


# ---------------------------------------------------------------------------
# single-layer radial integrals

def _radial_integrand(k, ni, nj, p, s):
    x = 2 * np.pi * k
    with np.errstate(invalid="ignore", divide="ignore"):
        val = (k ** (-8.0 / 3.0) * special.jv(ni + 1, x) * special.jv(nj + 1, x)
               / (np.pi * k) ** 2 * special.jv(p, x * s))
    return np.where(k > 0, val, 0.0)


def _panel_sum(edges_u, rule, ni, nj, p, s):
    # integrate over u with k = u^3, which removes the k^(-2/3) endpoint singularity
    nodes, weights = rule
    a, b = edges_u[:-1, None], edges_u[1:, None]
    u = 0.5 * (b - a) * nodes[None, :] + 0.5 * (a + b)
    k = u ** 3
    f = _radial_integrand(k, ni, nj, p, s) * 3 * u ** 2
    return float(np.sum(0.5 * (b - a) * weights[None, :] * f))


def radial_integral(ni: int, nj: int, p: int, s: float, rtol: float = 1e-6) -> float:
    """``int_0^inf k^(-8/3) J_{ni+1}(2 pi k) J_{nj+1}(2 pi k) / (pi k)^2 J_p(2 pi k s) dk``.

    Composite Gauss-Legendre with panels narrower than half a period of
    every Bessel factor; the result is accepted when a 16 and a 24 point rule
    agree to ``rtol``.
    """
    width = 0.5 / max(1.0, s)
    n_panels = int(np.ceil(_K_END / width))
    # panels uniform in k, mapped to u = k^(1/3); first panel refined geometrically
    k_edges = np.linspace(0.0, _K_END, n_panels + 1)
    inner = width * np.geomspace(1e-6, 1.0, 12)
    k_edges = np.unique(np.concatenate([[0.0], inner, k_edges[1:]]))
    u_edges = np.cbrt(k_edges)
    lo = _panel_sum(u_edges, _GL16, ni, nj, p, s)
    hi = _panel_sum(u_edges, _GL24, ni, nj, p, s)
    scale = max(abs(hi), 1e-12)
    if not np.isfinite(hi) or abs(hi - lo) > rtol * scale:
        raise QuadratureError(
            f"radial integral ({ni},{nj},{p}) at s={s:g} did not converge",
            diagnostics={"low_order": lo, "high_order": hi, "panels": len(u_edges) - 1})
    return hi


def _cache_dir() -> Path | None:
    root = os.environ.get("P2S_CACHE_DIR")
    if root == "":
        return None
    path = Path(root) if root else Path.home() / ".cache" / "p2sturb"
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError:
        return None
    return path


@lru_cache(maxsize=None)
def _radial_table(ni: int, nj: int, p: int):
    """Memoised radial integral on the separation grid, as a spline in log(s)."""
    key = hashlib.sha256(repr((ni, nj, p, _S_NODES.tobytes(), _K_END)).encode()).hexdigest()[:12]
    cache = _cache_dir()
    path = cache / f"radial_{ni}_{nj}_{p}_{key}.npy" if cache else None
    values = None
    if path is not None and path.exists():
        try:
            values = np.load(path)
            if values.shape != _S_NODES.shape:
                values = None
        except (OSError, ValueError):
            values = None
    if values is None:
        values = np.array([radial_integral(ni, nj, p, s) for s in _S_NODES])
        if path is not None:
            tmp = path.with_suffix(".tmp.npy")
            np.save(tmp, values)
            os.replace(tmp, path)
    logs = np.log(_S_NODES[1:])
    spline = CubicSpline(logs, values[1:])
    # power-law tail from the last two nodes
    v1, v2 = values[-2], values[-1]
    if v1 != 0 and v2 != 0 and np.sign(v1) == np.sign(v2):
        slope = np.log(abs(v2 / v1)) / (logs[-1] - logs[-2])
    else:
        slope = None
    return values[0], spline, values[1], slope, v2


def radial_function(ni: int, nj: int, p: int, s):
    """Interpolated radial integral at separations ``s`` (unit-radius apertures)."""
    v0, spline, v_first, slope, v_last = _radial_table(ni, nj, p)
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    s_min = _S_NODES[1]
    small = s < s_min
    big = s > S_MAX
    mid = ~(small | big)
    out[mid] = spline(np.log(s[mid]))
    out[small] = v0 + (v_first - v0) * s[small] / s_min
    if slope is None:
        out[big] = 0.0
    else:
        out[big] = v_last * (s[big] / S_MAX) ** slope
    return out


# ---------------------------------------------------------------------------
# angular structure of a mode pair

def _pair_terms(i: int, j: int):
    """Decompose the azimuthal product of modes ``i`` and ``j``.

    Returns ``[(p, kind, coefficient)]`` with ``kind`` in ``{'cos', 'sin'}``;
    the layer covariance is ``sum coefficient * I_p(s) * trig(p psi)``.
    """
    ni, mi = noll_index(i)
    nj, mj = noll_index(j)
    a, b = abs(mi), abs(mj)
    ci = mi >= 0  # cosine (or radial) mode
    cj = mj >= 0
    terms = []
    d = a - b
    sgn_d = 1 if d > 0 else (-1 if d < 0 else 0)
    if ci and cj:
        raw = [(abs(d), "cos", 0.5), (a + b, "cos", 0.5)]
    elif not ci and not cj:
        raw = [(abs(d), "cos", 0.5), (a + b, "cos", -0.5)]
    elif not ci and cj:
        raw = [(a + b, "sin", 0.5), (abs(d), "sin", 0.5 * sgn_d)]
    else:
        raw = [(a + b, "sin", 0.5), (abs(d), "sin", -0.5 * sgn_d)]
    for p, kind, c in raw:
        if c == 0:
            continue
        # i^(m_i - m_j) (-i)^p collapses to a real sign
        if p == a + b:
            phase = (-1) ** b
        else:
            phase = 1 if a >= b else (-1) ** (b - a)
        terms.append((p, kind, c * phase))
    norm_i = np.sqrt((ni + 1) * (1 if mi == 0 else 2)) * (-1) ** ((ni - a) // 2)
    norm_j = np.sqrt((nj + 1) * (1 if mj == 0 else 2)) * (-1) ** ((nj - b) // 2)
    # c_psd * R^(5/3) (R = 1/2 for D/r0 = 1) * 2 pi from the azimuthal integral
    pref = KOLMOGOROV_PSD_CONSTANT * 0.5 ** (5 / 3) * 2 * np.pi * norm_i * norm_j
    merged = {}
    for p, kind, c in terms:
        if kind == "sin" and p == 0:
            continue
        merged[(p, kind)] = merged.get((p, kind), 0.0) + pref * c
    return ni, nj, [(p, kind, c) for (p, kind), c in merged.items() if c != 0]


def layer_covariance(i: int, j: int, s, psi=0.0):
    """``E[a_i(0) a_j(s)]`` for one Kolmogorov layer at ``D/r0 = 1``.

    ``s`` is the displacement of aperture ``j`` in units of the aperture
    radius, ``psi`` its direction measured from the ``x`` (column) axis.
    """
    if i < 2 or j < 2:
        raise DimensionError("piston has no finite Kolmogorov covariance")
    ni, nj, terms = _pair_terms(i, j)
    s = np.asarray(s, dtype=float)
    psi = np.asarray(psi, dtype=float)
    out = np.zeros(np.broadcast(s, psi).shape)
    for p, kind, c in terms:
        trig = np.cos(p * psi) if kind == "cos" else np.sin(p * psi)
        out = out + c * radial_function(ni, nj, p, s) * trig
    return out


def _path_radial(ni, nj, p, separations):
    """Path-weighted radial integrals for normalised separations ``theta L / R``."""
    sn = np.asarray(separations, dtype=float)

    def f(t):
        if t >= 1.0:
            return np.zeros_like(sn)
        w = (8.0 / 3.0) * (1.0 - t) ** (5.0 / 3.0)
        return w * radial_function(ni, nj, p, sn * (t / (1.0 - t)))

    val, err, info = integrate.quad_vec(f, 0.0, 1.0, epsrel=1e-7, epsabs=1e-13,
                                        limit=2000, full_output=True)
    if not info.success or not np.all(np.isfinite(val)):
        raise QuadratureError("path integral failed",
                              diagnostics={"pair": (ni, nj, p), "err": err,
                                           "intervals": info.intervals.shape[0]})
    return val


_path_memo: dict = {}


def _path_radial_many(ni, nj, p, separations):
    keys = [(ni, nj, p, round(float(v), 12)) for v in separations]
    missing = sorted({k[3] for k in keys if k not in _path_memo})
    if missing:
        vals = _path_radial(ni, nj, p, missing)
        for v, r in zip(missing, vals):
            _path_memo[(ni, nj, p, v)] = float(r)
    return np.array([_path_memo[k] for k in keys])


def path_covariance(i: int, j: int, separation_norm, psi=0.0):
    """Path-integrated ``E[a_i a_j]`` at ``D/r0 = 1`` for normalised separations.

    Scalars in, scalar out; arrays broadcast against ``psi``.
    """
    ni, nj, terms = _pair_terms(i, j)
    sn = np.asarray(separation_norm, dtype=float)
    psi = np.asarray(psi, dtype=float)
    uniq, inv = np.unique(np.round(sn, 12), return_inverse=True)
    total = np.zeros(np.broadcast(sn, psi).shape)
    for p, kind, c in terms:
        v = _path_radial_many(ni, nj, p, uniq)[inv].reshape(sn.shape)
        trig = np.cos(p * psi) if kind == "cos" else np.sin(p * psi)
        total = total + c * v * trig
    if total.ndim == 0:
        return float(total)
    return total


def normalized_separation(separation_rad: float, config: OpticalConfig) -> float:
    return abs(separation_rad) * config.path_length_m / (config.aperture_diameter_m / 2)


def angular_correlation(mode_i: int, mode_j: int, separation: float, config: OpticalConfig,
                        direction: float = 0.0) -> float:
    """Normalised cross-correlation of Zernike coefficients of two viewing directions.

    ``separation`` is the angle between the directions in radians and
    ``direction`` the orientation of the separation in the pupil plane.
    """
    if mode_i < 2 or mode_j < 2:
        raise DimensionError("modes must be >= 2 (piston carries no correlation)")
    if separation < 0:
        raise DimensionError("separation must be >= 0")
    sn = normalized_separation(separation, config)
    num = path_covariance(mode_i, mode_j, sn, direction)
    den = np.sqrt(path_covariance(mode_i, mode_i, 0.0) * path_covariance(mode_j, mode_j, 0.0))
    return float(num / den)


def isotropic_tilt_kernel(separation_norm) -> np.ndarray:
    """Correlation of the tilt vector, ``E[t(0).t(s)] / E[|t|^2]``; rotation invariant."""
    sn = np.atleast_1d(np.asarray(separation_norm, dtype=float))
    c0 = path_covariance(2, 2, 0.0) + path_covariance(3, 3, 0.0)
    return (path_covariance(2, 2, sn) + path_covariance(3, 3, sn)) / c0


# ---------------------------------------------------------------------------
# anchor grid and covariance

@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """``G x G`` anchor points; ``positions[r, c] = (theta_y, theta_x)`` in radians."""

    g: int
    positions: np.ndarray = field(repr=False)
    pixel_positions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.g < 1:
            raise ConfigError(f"anchor grid size must be >= 1 (got {self.g})")
        if self.g * self.g > MAX_ANCHORS:
            raise ConfigError(f"{self.g}x{self.g} anchors exceed the maximum of {MAX_ANCHORS}")
        if self.positions.shape != (self.g, self.g, 2):
            raise DimensionError("positions must have shape (g, g, 2)")

    @classmethod
    def for_image(cls, g: int, height: int, width: int, config: OpticalConfig) -> "AnchorGrid":
        """Anchors registered to the corner pixel centres of an image."""
        if g == 1:
            rows = np.array([(height - 1) / 2])
            cols = np.array([(width - 1) / 2])
        else:
            rows = np.linspace(0.0, height - 1, g)
            cols = np.linspace(0.0, width - 1, g)
        pix = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
        return cls(g, pix * config.pixel_angle_rad, pix)

    @classmethod
    def regular(cls, g: int, spacing_rad: float) -> "AnchorGrid":
        idx = np.arange(g) * spacing_rad
        pos = np.stack(np.meshgrid(idx, idx, indexing="ij"), axis=-1)
        return cls(g, pos)

    @property
    def count(self) -> int:
        return self.g * self.g


@dataclass(eq=False)
class SpatialCovariance:
    """Structured covariance of all anchor coefficients.

    Low modes (2..j_cutoff) carry the full cross-mode, direction-dependent
    covariance from quadrature. Higher modes are regressed on the low modes
    at the same anchor and receive an independent residual with covariance
    ``(R_hh - B R_ll B^T) (x) K`` where ``K`` is the isotropic tilt kernel.
    Every anchor therefore has exactly the modal covariance ``R_Z``.

    For grids larger than :data:`DENSE_MAX_G` per side the dense low-mode block
    is replaced by ``R_ll (x) K``.
    """

    g: int
    k: int
    d_over_r0: float
    low_modes: tuple
    high_modes: tuple
    low_factor: np.ndarray | None  # dense, (G^2 L, G^2 L), anchor-major
    low_modal_factor: np.ndarray | None  # kron fallback
    kernel: np.ndarray  # (G^2, G^2)
    kernel_factor: np.ndarray
    regression: np.ndarray  # (H, L)
    residual_factor: np.ndarray  # (H, H)
    config_hash: str = ""
    low_cov: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_anchors(self) -> int:
        return self.g * self.g

    @property
    def dense_low(self) -> bool:
        return self.low_factor is not None

    def scaled(self, d_over_r0: float) -> "SpatialCovariance":
        f = (d_over_r0 / self.d_over_r0) ** (5 / 6)
        return SpatialCovariance(
            self.g, self.k, d_over_r0, self.low_modes, self.high_modes,
            None if self.low_factor is None else self.low_factor * f,
            None if self.low_modal_factor is None else self.low_modal_factor * f,
            self.kernel, self.kernel_factor, self.regression, self.residual_factor * f,
            self.config_hash, None if self.low_cov is None else self.low_cov * f * f)

    def sample_many(self, seed: int, draws: int = 1) -> np.ndarray:
        """``draws`` anchor fields, shape ``(draws, G, G, K)``."""
        rng = np.random.Generator(np.random.Philox(key=int(seed) & (2 ** 128 - 1)))
        na, nl, nh = self.n_anchors, len(self.low_modes), len(self.high_modes)
        z_low = rng.standard_normal((draws, na * nl))
        z_high = rng.standard_normal((draws, na, nh))
        if self.dense_low:
            low = (z_low @ self.low_factor.T).reshape(draws, na, nl)
        else:
            zl = z_low.reshape(draws, na, nl)
            low = np.matmul(np.matmul(self.kernel_factor, zl), self.low_modal_factor.T)
        out = np.zeros((draws, na, self.k))
        li = np.array(self.low_modes) - 1
        out[:, :, li] = low
        if nh:
            hi = np.array(self.high_modes) - 1
            resid = np.matmul(np.matmul(self.kernel_factor, z_high), self.residual_factor.T)
            out[:, :, hi] = low @ self.regression.T + resid
        return out.reshape(draws, self.g, self.g, self.k)

    def dense(self) -> np.ndarray:
        """Materialise the full ``(G^2 K, G^2 K)`` covariance (anchor-major)."""
        na, k = self.n_anchors, self.k
        nl = len(self.low_modes)
        li = np.array(self.low_modes) - 1
        hi = np.array(self.high_modes, dtype=int) - 1
        if self.dense_low:
            c_low = self.low_factor @ self.low_factor.T
        else:
            rl = self.low_modal_factor @ self.low_modal_factor.T
            c_low = np.kron(self.kernel, rl)
        c_low = c_low.reshape(na, nl, na, nl)
        full = np.zeros((na, k, na, k))
        b = self.regression
        res = self.residual_factor @ self.residual_factor.T
        full[np.ix_(range(na), li, range(na), li)] = c_low
        if len(hi):
            ll_b = np.einsum("albm,hm->albh", c_low, b)
            full[np.ix_(range(na), li, range(na), hi)] = ll_b
            full[np.ix_(range(na), hi, range(na), li)] = np.transpose(ll_b, (2, 3, 0, 1))
            hh = np.einsum("hl,albm,gm->ahbg", b, c_low, b) + np.einsum("ab,hg->ahbg", self.kernel, res)
            full[np.ix_(range(na), hi, range(na), hi)] = hh
        return full.reshape(na * k, na * k)

    def anchor_block(self) -> np.ndarray:
        """Modal covariance at a single anchor (zero separation)."""
        k = self.k
        li = np.array(self.low_modes) - 1
        hi = np.array(self.high_modes, dtype=int) - 1
        nl = len(li)
        if self.dense_low:
            c_ll = (self.low_factor @ self.low_factor.T)[:nl, :nl]
        else:
            c_ll = self.low_modal_factor @ self.low_modal_factor.T * self.kernel[0, 0]
        out = np.zeros((k, k))
        out[np.ix_(li, li)] = c_ll
        if len(hi):
            b = self.regression
            out[np.ix_(li, hi)] = c_ll @ b.T
            out[np.ix_(hi, li)] = b @ c_ll
            out[np.ix_(hi, hi)] = b @ c_ll @ b.T + self.residual_factor @ self.residual_factor.T * self.kernel[0, 0]
        return out


def geometry_key(config: OpticalConfig, grid: AnchorGrid, j_cutoff: int = J_CUTOFF) -> str:
    """Hash of everything a covariance depends on except the turbulence strength."""
    return config.with_d_over_r0(1.0).digest(grid.g, j_cutoff, grid.positions.tobytes())


def _displacements(grid: AnchorGrid):
    pos = grid.positions.reshape(-1, 2)
    d = pos[None, :, :] - pos[:, None, :]  # d[a, b] = pos_b - pos_a, (dy, dx)
    sep = np.hypot(d[..., 0], d[..., 1])
    psi = np.arctan2(d[..., 0], d[..., 1])
    return sep, psi


def _storage_bytes(na, nl, nh, dense):
    n = na * nl if dense else na
    return 8 * (3 * n * n + 2 * na * na + nh * nh + nh * nl)


def build_spatial_covariance(grid: AnchorGrid, config: OpticalConfig, j_cutoff: int = J_CUTOFF,
                             memory_budget: int = DEFAULT_MEMORY_BUDGET,
                             dense_max_g: int = DENSE_MAX_G) -> SpatialCovariance:
    """Covariance of all anchors' Zernike coefficients and its sampling factors."""
    k = config.zernike_count
    jc = min(j_cutoff, k)
    low = tuple(range(2, jc + 1))
    high = tuple(range(jc + 1, k + 1))
    na, nl, nh = grid.count, len(low), len(high)
    dense = grid.g <= dense_max_g
    need = _storage_bytes(na, nl, nh, dense)
    if need > memory_budget:
        raise MemoryBudgetError(
            f"anchor covariance for G={grid.g} needs ~{need / 2**30:.2f} GiB, budget is "
            f"{memory_budget / 2**30:.2f} GiB; use a smaller anchor grid")
    dr = config.d_over_r0
    rz = noll_covariance(k, dr).matrix
    li = np.array(low) - 1
    hi = np.array(high, dtype=int) - 1
    r_ll = rz[np.ix_(li, li)]
    scale = dr ** (5 / 3)
    radius = config.aperture_diameter_m / 2
    sep, psi = _displacements(grid)
    sep_n = sep * config.path_length_m / radius

    # isotropic kernel over distinct distances
    uniq, inv = np.unique(np.round(sep_n, 10), return_inverse=True)
    kern_vals = isotropic_tilt_kernel(uniq)
    kernel = kern_vals[inv].reshape(na, na)
    kernel_factor = psd_sqrt(kernel)

    low_factor = low_modal_factor = low_cov = None
    if dense:
        cov = np.empty((na, nl, na, nl))
        for a in range(nl):
            for b in range(nl):
                cov[:, a, :, b] = path_covariance(low[a], low[b], sep_n, psi) * scale
        # zero separation reproduces R_Z exactly
        same = sep_n == 0
        for a_ in range(na):
            for b_ in range(na):
                if same[a_, b_]:
                    cov[a_, :, b_, :] = r_ll
        low_cov = cov.reshape(na * nl, na * nl)
        low_cov = 0.5 * (low_cov + low_cov.T)
        low_factor = psd_sqrt(low_cov)
    else:
        log.info("anchor covariance: G=%d exceeds dense limit, using Kronecker form", grid.g)
        low_modal_factor = psd_sqrt(r_ll)

    if nh:
        r_hl = rz[np.ix_(hi, li)]
        r_hh = rz[np.ix_(hi, hi)]
        regression = np.linalg.solve(r_ll, r_hl.T).T
        residual = r_hh - regression @ r_ll @ regression.T
        residual_factor = psd_sqrt(residual)
    else:
        regression = np.zeros((0, nl))
        residual_factor = np.zeros((0, 0))
    return SpatialCovariance(grid.g, k, dr, low, high, low_factor, low_modal_factor,
                             kernel, kernel_factor, regression, residual_factor,
                             geometry_key(config, grid, j_cutoff), low_cov)


@dataclass(frozen=True, eq=False)
class AnchorField:
    g: int
    coeffs: np.ndarray = field(repr=False)
    seed: int


def sample_anchor_field(cov: SpatialCovariance, seed: int) -> AnchorField:
    """One draw of anchor coefficients; identical for identical ``(cov, seed)``."""
    coeffs = cov.sample_many(seed, 1)[0]
    return AnchorField(cov.g, coeffs, int(seed))


# ---------------------------------------------------------------------------
# cache file

COV_MAGIC = b"P2SC"
COV_VERSION = 1


def save_covariance(cov: SpatialCovariance, path) -> None:
    """Write sampling factors: header then float64 LE row-major blocks."""
    blocks = [np.array([[cov.d_over_r0]]),
              np.array([cov.low_modes], dtype=float),
              np.array([cov.high_modes], dtype=float).reshape(1, -1),
              cov.low_factor if cov.dense_low else np.zeros((0, 0)),
              cov.low_modal_factor if not cov.dense_low else np.zeros((0, 0)),
              cov.kernel, cov.kernel_factor, cov.regression, cov.residual_factor]
    digest = bytes.fromhex(cov.config_hash) if cov.config_hash else bytes(32)
    with open(path, "wb") as fh:
        fh.write(COV_MAGIC)
        fh.write(struct.pack("<HII", COV_VERSION, cov.g, cov.k))
        fh.write(digest)
        fh.write(struct.pack("<I", len(blocks)))
        for b in blocks:
            b = np.ascontiguousarray(b, dtype="<f8")
            fh.write(struct.pack("<II", *b.shape))
            fh.write(b.tobytes())


def load_covariance(path) -> SpatialCovariance:
    data = Path(path).read_bytes()
    if data[:4] != COV_MAGIC:
        raise FormatError(f"{path}: not a covariance cache (bad magic)")
    try:
        version, g, k = struct.unpack_from("<HII", data, 4)
        if version != COV_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported covariance version {version}")
        off = 14
        digest = data[off:off + 32]
        off += 32
        (nblocks,) = struct.unpack_from("<I", data, off)
        off += 4
        blocks = []
        for _ in range(nblocks):
            r, c = struct.unpack_from("<II", data, off)
            off += 8
            n = r * c * 8
            if off + n > len(data):
                raise FormatError(f"{path}: truncated covariance cache")
            blocks.append(np.frombuffer(data, dtype="<f8", count=r * c, offset=off).reshape(r, c).copy())
            off += n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated covariance cache") from exc
    if len(blocks) != 9:
        raise FormatError(f"{path}: unexpected block count {len(blocks)}")
    dr = float(blocks[0][0, 0])
    low = tuple(int(v) for v in blocks[1].ravel())
    high = tuple(int(v) for v in blocks[2].ravel())
    low_factor = blocks[3] if blocks[3].size else None
    low_modal = blocks[4] if blocks[4].size else None
    regression = blocks[7].reshape(len(high), len(low))
    residual = blocks[8].reshape(len(high), len(high))
    return SpatialCovariance(g, k, dr, low, high, low_factor, low_modal, blocks[5], blocks[6],
                             regression, residual, digest.hex())
