"""Reference renderer and statistical checks of the fast simulator."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .basis import PsfBasis, project_psf
from .config import OpticalConfig
from .correlation import (AnchorGrid, SpatialCovariance, build_spatial_covariance,
                          isotropic_tilt_kernel, normalized_separation, path_covariance)
from .engine import (SimAssets, SimFrame, coefficient_maps, interpolate_alpha, render,
                     simulate_frame, tilt_to_pixels)
from .errors import ConfigError, DimensionError, SizeGuardError
from .optics import (ApertureGrid, Psf, ZernikeBasisSet, center_psf, diffraction_limited_psf,
                     noll_covariance, psd_sqrt, psf_batch)

ORACLE_MAX_PIXELS = 2 ** 14
KOLMOGOROV_SF = 2 * ((24 / 5) * math.gamma(6 / 5)) ** (5 / 6)  # 6.8839


def _odd(n: int) -> int:
    return n if n % 2 else n + 1


def _modes(config: OpticalConfig):
    grid = ApertureGrid.create(config.phase_grid_px)
    return grid, ZernikeBasisSet.create(grid, config.zernike_count).modes


def oracle_psfs(dense_alpha, config: OpticalConfig, size: int, chunk: int = 256) -> np.ndarray:
    """Per-pixel oracle PSFs ``(H, W, size, size)`` from full coefficient maps."""
    grid, modes = _modes(config)
    h, w, k = dense_alpha.shape
    flat = np.asarray(dense_alpha, dtype=np.float64).reshape(h * w, k)
    out = np.empty((h * w, size, size))
    for start in range(0, h * w, chunk):
        phases = np.tensordot(flat[start:start + chunk], modes, axes=(1, 0))
        out[start:start + chunk] = psf_batch(phases, grid, size, config.oversampling)
    return out.reshape(h, w, size, size)


def oracle_support(dense_alpha, config: OpticalConfig) -> int:
    """PSF crop large enough to hold the configured support shifted by the largest tilt."""
    shift = np.abs(tilt_to_pixels(np.asarray(dense_alpha)[..., 1:3], config)).max(initial=0.0)
    size = _odd(config.psf_size_px + 2 * int(math.ceil(shift)))
    limit = int(math.floor(config.oversampling * config.phase_grid_px))
    return min(size, limit if limit % 2 else limit - 1)


def brute_force_frame(x, dense_alpha, config: OpticalConfig, max_pixels: int = ORACLE_MAX_PIXELS,
                      allow_large: bool = False, size: int | None = None) -> SimFrame:
    """Exact spatially varying convolution with one Fourier-optics PSF per pixel.

    Tilts stay in the phase, so the PSF crop is enlarged to contain the
    displaced pattern. Boundaries are edge replicated like the fast path.
    """
    x = np.asarray(x, dtype=np.float64)
    dense_alpha = np.asarray(dense_alpha, dtype=np.float64)
    h, w = x.shape[:2]
    if dense_alpha.shape[:2] != (h, w):
        raise DimensionError(f"coefficient map {dense_alpha.shape[:2]} does not match image {(h, w)}")
    if h * w > max_pixels and not allow_large:
        raise SizeGuardError(f"{h}x{w} exceeds the oracle guard of {max_pixels} pixels; "
                             "pass allow_large=True to override")
    size = oracle_support(dense_alpha, config) if size is None else size
    psfs = oracle_psfs(dense_alpha, config, size)
    if x.ndim == 3:
        y = np.stack([_kernels.gather(x[..., c], psfs) for c in range(x.shape[2])], axis=-1)
    else:
        y = _kernels.gather(x, psfs)
    return SimFrame(y, {"oracle_psf_size": size, "config_hash": config.digest()})


def fast_frame_from_dense(x, dense_alpha, config: OpticalConfig, basis: PsfBasis,
                          weights) -> np.ndarray:
    """Fast path driven by a given dense coefficient map (no anchor sampling)."""
    maps = coefficient_maps(np.asarray(dense_alpha, dtype=np.float32), config, weights)
    return render(x, maps, basis, dtype=np.float64)


@dataclass
class ExactModeResult:
    error: float  # ||y_fast - y_oracle||
    bound: float  # PCA truncation residual propagated through the image
    reference_norm: float  # ||y_oracle||

    @property
    def relative_error(self) -> float:
        return self.error / self.reference_norm


def exact_mode_check(x, dense_alpha, config: OpticalConfig, basis: PsfBasis) -> ExactModeResult:
    """Fast-path compositing with projected (not predicted) weights, tilts removed.

    The bound follows from Cauchy-Schwarz at every pixel:
    ``|y_fast[n] - y_oracle[n]| <= ||h_hat_n - h_n|| ||x patch_n||``, so the
    image error is bounded by the per-pixel PCA truncation residuals alone.
    """
    from .engine import basis_convolve, compose
    x = np.asarray(x, dtype=np.float64)
    alpha = np.array(dense_alpha, dtype=np.float64)
    alpha[..., :3] = 0.0
    s = basis.size
    psfs = oracle_psfs(alpha, config, s)
    beta = project_psf(psfs, basis)
    recon = basis.mean_psf + np.tensordot(beta, basis.components, axes=([-1], [0]))
    resid = np.sqrt(np.sum((recon - psfs) ** 2, axis=(-2, -1)))
    y_oracle = _kernels.gather(x, psfs)
    y_fast = compose(basis_convolve(x, basis, np.float64), np.ascontiguousarray(np.moveaxis(beta, -1, 0)))
    r = s // 2
    win = np.lib.stride_tricks.sliding_window_view(np.pad(x, r, mode="edge"), (s, s))
    patch_norm = np.sqrt(np.sum(win ** 2, axis=(-2, -1)))
    return ExactModeResult(float(np.linalg.norm(y_fast - y_oracle)),
                           float(np.sqrt(np.sum((resid * patch_norm) ** 2))),
                           float(np.linalg.norm(y_oracle)))


# ---------------------------------------------------------------------------
# tilt statistics

@dataclass
class TiltStatsReport:
    separations: list
    z_tilt_corr: list
    diff_tilt_var: list
    theory_z_tilt: list
    theory_diff_tilt: list
    sample_count: int
    pair_counts: list = field(default_factory=list)
    point_variance: float = float("nan")

    def max_relative_deviation(self, min_theory: float = 0.0):
        """Largest relative deviation of each curve; zero-theory rows are skipped."""
        zc = [abs(e - t) / abs(t) for e, t in zip(self.z_tilt_corr, self.theory_z_tilt)
              if abs(t) > min_theory]
        dv = [abs(e - t) / abs(t) for e, t in zip(self.diff_tilt_var, self.theory_diff_tilt) if t > 0]
        return max(zc, default=0.0), max(dv, default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["separation_rad", "z_tilt_corr", "theory_z_tilt", "diff_tilt_var",
                     "theory_diff_tilt", "pairs"])
        for row in zip(self.separations, self.z_tilt_corr, self.theory_z_tilt,
                       self.diff_tilt_var, self.theory_diff_tilt, self.pair_counts):
            wr.writerow([f"{v:.9g}" for v in row[:5]] + [row[5]])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'sep [urad]':>12} {'corr':>9} {'theory':>9} {'dvar':>10} {'theory':>10}"]
        for s, z, tz, d, td in zip(self.separations, self.z_tilt_corr, self.theory_z_tilt,
                                   self.diff_tilt_var, self.theory_diff_tilt):
            lines.append(f"{s * 1e6:12.3f} {z:9.4f} {tz:9.4f} {d:10.4f} {td:10.4f}")
        return "\n".join(lines)


def tilt_statistics(cov: SpatialCovariance, config: OpticalConfig, draws: int, seed: int,
                    grid: AnchorGrid | None = None, chunk: int = 2000) -> TiltStatsReport:
    """Monte-Carlo tilt correlation versus anchor separation, with quadrature theory.

    The vector tilt ``t = (a2, a3)`` is pooled over all anchor pairs at the same
    distance; its normalised correlation is rotation invariant, so the theory
    curve is ``(C22 + C33)(theta) / (R22 + R33)``.
    """
    if draws < 100:
        raise ConfigError(f"tilt statistics need >= 100 draws (got {draws})")
    if grid is None:
        raise ConfigError("anchor grid positions are required")
    pos = grid.positions.reshape(-1, 2)
    d = pos[None, :, :] - pos[:, None, :]
    sep = np.hypot(d[..., 0], d[..., 1])
    iu = np.triu_indices(len(pos))
    key = np.round(sep[iu] / max(sep.max(), 1e-300), 9)
    uniq, inv = np.unique(key, return_inverse=True)
    n_sep = len(uniq)
    dot = np.zeros(n_sep)
    dsq = np.zeros(n_sep)
    counts = np.bincount(inv, minlength=n_sep)
    point = 0.0
    done = 0
    block = 0
    while done < draws:
        n = min(chunk, draws - done)
        a = cov.sample_many(seed * 1_000_003 + block, n).reshape(n, -1, cov.k)
        t = a[..., 1:3]
        prod = np.einsum("nac,nbc->ab", t, t)
        dot += np.bincount(inv, weights=prod[iu], minlength=n_sep)
        sq = np.einsum("nac,nac->a", t, t)
        diff = sq[:, None] + sq[None, :] - 2 * prod
        dsq += np.bincount(inv, weights=diff[iu], minlength=n_sep)
        point += sq.sum()
        done += n
        block += 1
    point /= draws * len(pos)
    corr = dot / (counts * draws) / point
    dvar = dsq / (counts * draws)
    seps = np.array([sep[iu][inv == i][0] for i in range(n_sep)])
    sn = np.array([normalized_separation(s, config) for s in seps])
    theory_rho = isotropic_tilt_kernel(sn)
    var0 = cov.d_over_r0 ** (5 / 3) * (path_covariance(2, 2, 0.0) + path_covariance(3, 3, 0.0))
    return TiltStatsReport(list(seps), list(corr), list(dvar), list(theory_rho),
                           list(2 * var0 * (1 - theory_rho)), draws, list(counts), float(point))


# ---------------------------------------------------------------------------
# exposures

@dataclass
class ExposureReport:
    se_psf: np.ndarray = field(repr=False)
    le_psf: np.ndarray = field(repr=False)
    frequencies: np.ndarray = field(repr=False)
    mtf_le: np.ndarray = field(repr=False)
    mtf_se: np.ndarray = field(repr=False)
    theory_mtf_le: np.ndarray = field(repr=False)
    theory_mtf_se: np.ndarray = field(repr=False)
    frames_averaged: int = 0

    @property
    def le_second_moment(self) -> float:
        return radial_second_moment(self.le_psf)

    @property
    def se_second_moment(self) -> float:
        return radial_second_moment(self.se_psf)

    def max_le_deviation(self, nu_max: float = 0.8) -> float:
        sel = self.frequencies <= nu_max + 1e-12
        return float(np.max(np.abs(self.mtf_le[sel] - self.theory_mtf_le[sel])))


def radial_second_moment(h) -> float:
    """``sum h r^2 / sum h`` about the array centre (pixels^2)."""
    h = np.asarray(h, dtype=float)
    c = (np.arange(h.shape[0]) - (h.shape[0] - 1) / 2)
    r2 = c[:, None] ** 2 + c[None, :] ** 2
    return float(np.sum(h * r2) / np.sum(h))


def diffraction_mtf(nu):
    nu = np.clip(np.asarray(nu, dtype=float), 0.0, 1.0)
    return (2 / np.pi) * (np.arccos(nu) - nu * np.sqrt(1 - nu * nu))


def theory_mtf(nu, d_over_r0: float, short: bool = False):
    """Classical Kolmogorov transfer functions on frequency normalised to ``D / lambda``.

    Long exposure: ``MTF_dl exp(-3.44 (nu D/r0)^(5/3))``; short exposure
    (tilt removed, near field) multiplies the exponent by ``1 - nu^(1/3)``.
    """
    nu = np.asarray(nu, dtype=float)
    expo = 0.5 * KOLMOGOROV_SF * (nu * d_over_r0) ** (5 / 3)
    if short:
        expo = expo * (1 - np.cbrt(np.clip(nu, 0, 1)))
    return diffraction_mtf(nu) * np.exp(-expo)


def radial_mtf(h, oversampling: float, nu, angles: int = 16) -> np.ndarray:
    """Azimuthally averaged ``|OTF|`` at normalised frequencies, by direct summation."""
    h = np.asarray(h, dtype=float)
    h = h / h.sum()
    c = np.arange(h.shape[0]) - (h.shape[0] - 1) / 2
    phis = np.arange(angles) * np.pi / angles
    out = np.zeros(len(nu))
    for phi in phis:
        ex = np.exp(-2j * np.pi * np.outer(np.asarray(nu) / oversampling, c) * np.cos(phi))
        ey = np.exp(-2j * np.pi * np.outer(np.asarray(nu) / oversampling, c) * np.sin(phi))
        # sum_r sum_c h[r, c] ey[f, r] ex[f, c]
        out += np.abs(np.einsum("fr,rc,fc->f", ey, h, ex))
    return out / angles


def exposure_psfs(config: OpticalConfig, frames: int, seed: int, size: int = 129,
                  chunk: int = 100, n_freq: int = 41) -> ExposureReport:
    """Long (raw average) and short (centred average) exposure oracle PSFs."""
    if frames < 100:
        raise ConfigError(f"exposure statistics need >= 100 frames (got {frames})")
    grid, modes = _modes(config)
    k = config.zernike_count
    factor = psd_sqrt(noll_covariance(k, config.d_over_r0).matrix)
    le = np.zeros((size, size))
    se = np.zeros((size, size))
    from .basis import entry_rng
    for start in range(0, frames, chunk):
        idx = range(start, min(start + chunk, frames))
        alphas = np.array([factor @ entry_rng(seed, i).standard_normal(k) for i in idx])
        phases = np.tensordot(alphas, modes, axes=(1, 0))
        psfs = psf_batch(phases, grid, size, config.oversampling)
        le += psfs.sum(0)
        for p in psfs:
            se += center_psf(p)[0]
    le /= frames
    se /= frames
    nu = np.linspace(0.0, 1.0, n_freq)
    q = config.oversampling
    return ExposureReport(se, le, nu, radial_mtf(le, q, nu), radial_mtf(se, q, nu),
                          theory_mtf(nu, config.d_over_r0), theory_mtf(nu, config.d_over_r0, True),
                          frames)


# ---------------------------------------------------------------------------
# interpolation domain comparison

def strehl(h, config: OpticalConfig, size: int | None = None) -> float:
    """Peak of ``h`` relative to the same-grid diffraction-limited peak."""
    h = h.values if isinstance(h, Psf) else np.asarray(h)
    grid = ApertureGrid.create(config.phase_grid_px)
    dl = diffraction_limited_psf(grid, h.shape[0], config.oversampling)
    return float(h.max() / dl.max())


def interp_comparison(alpha_a, alpha_b, lam: float, config: OpticalConfig):
    """Phase-domain versus PSF-domain interpolation of two aberrations.

    Returns ``(psf_phase, psf_space, (strehl_phase, strehl_space))``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1] (got {lam})")
    grid, modes = _modes(config)
    a = np.asarray(alpha_a, dtype=float)
    b = np.asarray(alpha_b, dtype=float)
    if a.shape != (config.zernike_count,) or b.shape != a.shape:
        raise DimensionError(f"coefficient vectors must have length {config.zernike_count}")
    s = config.psf_size_px
    q = config.oversampling
    phases = np.stack([np.tensordot(lam * a + (1 - lam) * b, modes, axes=(0, 0)),
                       np.tensordot(a, modes, axes=(0, 0)), np.tensordot(b, modes, axes=(0, 0))])
    h_mid, h_a, h_b = psf_batch(phases, grid, s, q)
    h_space = lam * h_a + (1 - lam) * h_b
    h_space = h_space / h_space.sum()
    return (Psf(h_mid), Psf(h_space), (strehl(h_mid, config), strehl(h_space, config)))


def opposite_pair(config: OpticalConfig, rng: np.random.Generator, rms: float = 2.0,
                  mismatch: float = 0.2):
    """Random high-order aberration ``a`` (RMS ``rms`` rad, Kolmogorov-shaped) and
    ``b = -a + e`` with a small independent ``e`` of RMS ``mismatch`` rad."""
    k = config.zernike_count
    factor = psd_sqrt(noll_covariance(k, 1.0).matrix)
    a = factor @ rng.standard_normal(k)
    e = factor @ rng.standard_normal(k)
    a[:3] = 0.0
    e[:3] = 0.0
    a *= rms / np.linalg.norm(a)
    e *= mismatch / np.linalg.norm(e) if mismatch > 0 else 0.0
    return a, -a + e


# ---------------------------------------------------------------------------
# colour

@dataclass
class ColorComparison:
    single_psf_frame: np.ndarray = field(repr=False)
    per_wavelength_frame: np.ndarray = field(repr=False)
    error_map: np.ndarray = field(repr=False)
    max_rel_error: float = 0.0


def color_comparison(x, config: OpticalConfig, wavelengths, seed: int, g: int = 4,
                     reference_wavelength: float | None = None) -> ColorComparison:
    """Shared-map render at the reference wavelength versus per-channel wavelengths.

    Both renders use the per-pixel oracle and the same random draw. Phase
    scales as ``lambda_ref / lambda`` (equivalently ``r0 ~ lambda^(6/5)``) and
    the PSF sampling follows each wavelength; tilt in pixels is achromatic.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3 or len(wavelengths) != 3:
        raise DimensionError("colour comparison needs an (H, W, 3) image and three wavelengths")
    if config.d_over_r0 > 8:
        raise ConfigError(f"colour comparison is limited to D/r0 <= 8 (got {config.d_over_r0:g})")
    ref = config.wavelength_m if reference_wavelength is None else reference_wavelength
    base = config.at_wavelength(ref)
    h, w = x.shape[:2]
    grid = AnchorGrid.for_image(g, h, w, base)
    cov = build_spatial_covariance(grid, base)
    dense = interpolate_alpha(cov.sample_many(seed, 1)[0], h, w)
    single = brute_force_frame(x, dense, base).values
    multi = np.empty_like(single)
    for c, lam in enumerate(wavelengths):
        cfg_c = base.at_wavelength(lam)
        multi[..., c] = brute_force_frame(x[..., c], dense * (ref / lam), cfg_c).values
    err = np.abs(single - multi)
    peak = float(np.max(np.abs(multi))) or 1.0
    return ColorComparison(single, multi, err, float(err.max() / peak))


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchReport:
    image_size: int
    frames: int
    fast_seconds_per_frame: float | None
    oracle_seconds_per_frame: float | None
    oracle_tile: int
    oracle_extrapolated: bool
    workers: int = 1
    fast_times: list = field(default_factory=list)

    @property
    def speedup(self) -> float | None:
        if not self.fast_seconds_per_frame or self.oracle_seconds_per_frame is None:
            return None
        return self.oracle_seconds_per_frame / self.fast_seconds_per_frame

    def to_table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.4g}"
        note = " (extrapolated from a %dx%d tile)" % (self.oracle_tile, self.oracle_tile) \
            if self.oracle_extrapolated else ""
        return "\n".join([
            f"run time per {self.image_size}x{self.image_size} frame, {self.frames} frames, "
            f"{self.workers} worker(s)",
            f"{'method':<28}{'seconds/frame':>16}",
            f"{'per-pixel oracle':<28}{fmt(self.oracle_seconds_per_frame):>16}{note}",
            f"{'fast path (P2S)':<28}{fmt(self.fast_seconds_per_frame):>16}",
            f"{'speedup':<28}{fmt(self.speedup):>16}",
        ])


def benchmark(config: OpticalConfig, image_size: int, frames: int, assets: SimAssets,
              oracle_tile: int = 16, seed: int = 0, workers: int = 1) -> BenchReport:
    """Wall-clock time of the fast path and of the per-pixel oracle.

    The oracle runs on an ``oracle_tile`` square cut from the same frame and is
    extrapolated linearly in pixel count (its cost is strictly per pixel).
    """
    if frames <= 0:
        return BenchReport(image_size, 0, None, None, oracle_tile, False, workers)
    rng = np.random.Generator(np.random.Philox(key=seed))
    x = rng.uniform(0.0, 1.0, (image_size, image_size))
    simulate_frame(x, config, assets, seed)  # warm caches and compiled kernels
    times = []
    for f in range(frames):
        t0 = time.perf_counter()
        simulate_frame(x, config, assets, seed + f + 1)
        times.append(time.perf_counter() - t0)
    fast = float(np.median(times))
    tile = min(oracle_tile, image_size)
    cov = assets.covariance
    if not np.isclose(cov.d_over_r0, config.d_over_r0):
        cov = cov.scaled(config.d_over_r0)
    dense = interpolate_alpha(cov.sample_many(seed, 1)[0], image_size, image_size)[:tile, :tile]
    t0 = time.perf_counter()
    brute_force_frame(x[:tile, :tile], dense, config)
    oracle_tile_time = time.perf_counter() - t0
    oracle = oracle_tile_time * (image_size * image_size) / (tile * tile)
    return BenchReport(image_size, frames, fast, oracle, tile, tile < image_size, workers, times)
