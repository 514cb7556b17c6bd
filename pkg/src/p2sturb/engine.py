"""Fast render path: phase-domain interpolation, P2S, invariant convolutions, warp."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import fft as sfft

from . import _kernels
from .basis import PsfBasis
from .config import OpticalConfig
from .correlation import (J_CUTOFF, AnchorField, AnchorGrid, SpatialCovariance, geometry_key,
                          sample_anchor_field)
from .errors import ConfigError, DimensionError, SizeGuardError
from .network import MlpWeights, forward_from_preactivation, p2s_forward_batch
from .optics import ApertureGrid, tilt_shift_per_radian


@dataclass(frozen=True, eq=False)
class CoefficientMaps:
    """Per-pixel basis weights ``beta`` (M, H, W) and tilt (2, H, W) in pixels (row, col)."""

    beta: np.ndarray
    tilt: np.ndarray


@dataclass(frozen=True, eq=False)
class SimFrame:
    values: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class SimAssets:
    basis: PsfBasis
    weights: MlpWeights
    covariance: SpatialCovariance


def covariance_key(config: OpticalConfig, g: int, height: int, width: int,
                   j_cutoff: int = J_CUTOFF) -> str:
    """Geometry hash of the covariance an image of this size needs."""
    return geometry_key(config, AnchorGrid.for_image(g, height, width, config), j_cutoff)


# ---------------------------------------------------------------------------
# interpolation and tilt

def _interp_matrix(n_out: int, g: int) -> np.ndarray:
    """Rows of linear interpolation weights from ``g`` corner-registered anchors."""
    mat = np.zeros((n_out, g))
    if g == 1:
        mat[:, 0] = 1.0
        return mat
    if n_out == 1:
        mat[0, 0] = 1.0
        return mat
    # u = i (g-1)/(n-1), written so anchor pixels land on integers exactly
    num = np.arange(n_out) * (g - 1)
    i0 = np.minimum(num // (n_out - 1), g - 2)
    frac = (num - i0 * (n_out - 1)) / (n_out - 1)
    rows = np.arange(n_out)
    mat[rows, i0] = 1.0 - frac
    mat[rows, i0 + 1] += frac
    return mat


def interpolate_alpha(anchors, height: int, width: int, dtype=np.float64) -> np.ndarray:
    """Dense ``(H, W, K)`` coefficients by separable bilinear interpolation.

    Anchor ``(a, b)`` of a ``G x G`` grid sits on pixel
    ``(a (H-1)/(G-1), b (W-1)/(G-1))``; a single anchor gives a constant field.
    """
    coeffs = anchors.coeffs if isinstance(anchors, AnchorField) else np.asarray(anchors)
    if coeffs.ndim != 3 or coeffs.shape[0] != coeffs.shape[1]:
        raise DimensionError(f"anchor coefficients must be (G, G, K), got {coeffs.shape}")
    g = coeffs.shape[0]
    ry = _interp_matrix(height, g).astype(dtype)
    rx = _interp_matrix(width, g).astype(dtype)
    g2, k = coeffs.shape[1], coeffs.shape[2]
    tmp = (ry @ coeffs.astype(dtype).reshape(g, g2 * k)).reshape(height, g2, k)
    return np.matmul(rx, tmp)


def bilinear_at(anchors, height: int, width: int, row: float, col: float) -> np.ndarray:
    """Direct bilinear formula at one (possibly fractional) pixel position."""
    coeffs = anchors.coeffs if isinstance(anchors, AnchorField) else np.asarray(anchors)
    g = coeffs.shape[0]
    if g == 1:
        return coeffs[0, 0].copy()
    u = row * (g - 1) / (height - 1)
    v = col * (g - 1) / (width - 1)
    i, j = min(int(np.floor(u)), g - 2), min(int(np.floor(v)), g - 2)
    fu, fv = u - i, v - j
    return ((1 - fu) * (1 - fv) * coeffs[i, j] + (1 - fu) * fv * coeffs[i, j + 1]
            + fu * (1 - fv) * coeffs[i + 1, j] + fu * fv * coeffs[i + 1, j + 1])


@lru_cache(maxsize=16)
def _shift_constant(phase_grid_px: int, oversampling: float) -> float:
    return tilt_shift_per_radian(ApertureGrid.create(phase_grid_px), oversampling)


def tilt_to_pixels(alpha_tilt, config: OpticalConfig) -> np.ndarray:
    """Image displacement ``(row, col)`` in pixels for tilt coefficients ``(a2, a3)``.

    Mode 2 (cosine, along x) moves the PSF along columns, mode 3 along rows.
    Accepts ``(..., 2)`` arrays.
    """
    a = np.asarray(alpha_tilt, dtype=float)
    k = _shift_constant(config.phase_grid_px, config.oversampling)
    return np.stack([k * a[..., 1], k * a[..., 0]], axis=-1)


# ---------------------------------------------------------------------------
# invariant convolutions

def _kernel_spectra(basis: PsfBasis, n0: int, n1: int, dtype) -> np.ndarray:
    cache = basis.__dict__.setdefault("_spectra", {})
    key = (n0, n1, np.dtype(dtype).name)
    if key not in cache:
        kern = np.concatenate([basis.mean_psf[None], basis.components]).astype(dtype)
        cache[key] = sfft.rfft2(kern, s=(n0, n1), axes=(-2, -1))
    return cache[key]


def _check_size(h: int, w: int, s: int) -> None:
    # edge replication reaches s // 2 pixels out; below that the halo would be
    # built from a border narrower than the kernel arm
    if min(h, w) <= s // 2:
        raise SizeGuardError(f"image {h}x{w} is smaller than the {s // 2 + 1}-pixel "
                             f"half-width of the {s}x{s} kernel")


def basis_convolve(x, basis: PsfBasis, dtype=np.float32) -> np.ndarray:
    """Convolve an image with the mean PSF and every basis component.

    Returns ``(M + 1, H, W)``; index 0 is the mean-PSF image. Boundaries are
    edge replicated; the transform size is a fast length >= ``H + S - 1``.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a single-channel image, got shape {x.shape}")
    s = basis.size
    h, w = x.shape
    _check_size(h, w, s)
    r = s // 2
    xp = np.pad(x.astype(dtype), r, mode="edge")
    n0 = sfft.next_fast_len(h + s - 1, real=True)
    n1 = sfft.next_fast_len(w + s - 1, real=True)
    spec = _kernel_spectra(basis, n0, n1, dtype)
    xs = sfft.rfft2(xp, s=(n0, n1))
    out = sfft.irfft2(spec * xs, s=(n0, n1), axes=(-2, -1))
    return out[:, s - 1:s - 1 + h, s - 1:s - 1 + w]


def convolve_compose(x, basis: PsfBasis, beta, dtype=np.float32) -> np.ndarray:
    """``basis_convolve`` followed by ``compose`` without storing the filtered stack.

    Each component image is formed and accumulated in turn, which keeps the
    working set small; the sum order matches :func:`compose`.
    """
    x = np.asarray(x)
    s = basis.size
    h, w = x.shape
    _check_size(h, w, s)
    r = s // 2
    xp = np.pad(x.astype(dtype), r, mode="edge")
    n0 = sfft.next_fast_len(h + s - 1, real=True)
    n1 = sfft.next_fast_len(w + s - 1, real=True)
    spec = _kernel_spectra(basis, n0, n1, dtype)
    xs = sfft.rfft2(xp, s=(n0, n1))
    crop = (slice(s - 1, s - 1 + h), slice(s - 1, s - 1 + w))
    y = np.ascontiguousarray(sfft.irfft2(spec[0] * xs, s=(n0, n1))[crop])
    for m in range(beta.shape[0]):
        y += beta[m] * sfft.irfft2(spec[m + 1] * xs, s=(n0, n1))[crop]
    return y


def compose(filtered, beta) -> np.ndarray:
    """``y_n = filtered_0[n] + sum_m beta[m, n] filtered_m[n]``."""
    filtered = np.asarray(filtered)
    beta = np.asarray(beta)
    if filtered.ndim != 3 or beta.ndim != 3 or filtered.shape[0] != beta.shape[0] + 1 \
            or filtered.shape[1:] != beta.shape[1:]:
        raise DimensionError(f"filtered {filtered.shape} and beta {beta.shape} are inconsistent")
    dt = np.result_type(filtered.dtype, beta.dtype)
    return _kernels.compose(np.ascontiguousarray(filtered, dt), np.ascontiguousarray(beta, dt))


def tilt_warp(img, tilt) -> np.ndarray:
    """Backward bilinear warp ``out[n] = img(n - tilt[n])``, replicate boundary."""
    img = np.asarray(img)
    tilt = np.asarray(tilt, dtype=np.float64)
    if tilt.shape != (2, *img.shape):
        raise DimensionError(f"tilt shape {tilt.shape} does not match image {img.shape}")
    return _kernels.warp(np.ascontiguousarray(img), np.ascontiguousarray(tilt))


# ---------------------------------------------------------------------------
# frame pipeline

def coefficient_maps(dense_alpha, config: OpticalConfig, weights: MlpWeights) -> CoefficientMaps:
    """Run P2S on every pixel's high-order coefficients and convert tilts."""
    h, w, k = dense_alpha.shape
    if k != config.zernike_count or weights.k_in != k - 3:
        raise ConfigError(f"coefficient count {k} does not match config ({config.zernike_count}) "
                          f"and network input {weights.k_in} + 3")
    beta = p2s_forward_batch(dense_alpha[..., 3:].reshape(h * w, k - 3), weights,
                             transpose=True).reshape(weights.m, h, w)
    tilt = np.moveaxis(tilt_to_pixels(dense_alpha[..., 1:3], config), -1, 0)
    return CoefficientMaps(beta, tilt)


def anchor_coefficient_maps(anchors, height: int, width: int, config: OpticalConfig,
                            weights: MlpWeights, rows_per_block: int | None = None) -> CoefficientMaps:
    """Coefficient maps straight from anchor draws.

    The first network layer is affine and bilinear weights sum to one, so its
    pre-activations are interpolated from the anchors instead of being
    computed per pixel; this equals :func:`coefficient_maps` on the dense
    field up to float32 rounding and avoids materialising that field.
    """
    coeffs = anchors.coeffs if isinstance(anchors, AnchorField) else np.asarray(anchors)
    g, _, k = coeffs.shape
    if k != config.zernike_count or weights.k_in != k - 3:
        raise ConfigError(f"coefficient count {k} does not match config ({config.zernike_count}) "
                          f"and network input {weights.k_in} + 3")
    ws, bs = weights.float32()
    n1 = ws[0].shape[1]
    z1 = coeffs[..., 3:].astype(np.float32).reshape(g * g, k - 3) @ ws[0] + bs[0]
    ry = _interp_matrix(height, g).astype(np.float32)
    rx = _interp_matrix(width, g).astype(np.float32)
    tmp = (ry @ z1.reshape(g, g * n1)).reshape(height, g, n1)
    beta = np.empty((weights.m, height * width), dtype=np.float32)
    step = rows_per_block or max(1, 4096 // width)
    for r0 in range(0, height, step):
        r1 = min(r0 + step, height)
        z = np.matmul(rx, tmp[r0:r1]).reshape(-1, n1)
        beta[:, r0 * width:r1 * width] = forward_from_preactivation(z, ws, bs).T
    tilt_anchor = coeffs[..., 1:3]
    tilt_dense = interpolate_alpha(tilt_anchor, height, width)
    tilt = np.moveaxis(tilt_to_pixels(tilt_dense, config), -1, 0)
    return CoefficientMaps(beta.reshape(weights.m, height, width), np.ascontiguousarray(tilt))


def render(x, maps: CoefficientMaps, basis: PsfBasis, warp_tilt: bool = True,
           clamp: bool = True, dtype=np.float32) -> np.ndarray:
    """Apply the blur and warp stages to a gray ``(H, W)`` or colour ``(H, W, C)`` image.

    Every channel uses the same maps; channels are processed independently so
    identical input channels produce identical outputs.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        return np.stack([render(x[..., c], maps, basis, warp_tilt, clamp, dtype)
                         for c in range(x.shape[2])], axis=-1)
    if maps.beta.shape[1:] != x.shape:
        raise DimensionError(f"maps {maps.beta.shape[1:]} do not match image {x.shape}")
    if maps.beta.shape[0] != basis.m:
        raise DimensionError(f"maps carry {maps.beta.shape[0]} weights, basis has {basis.m}")
    y = convolve_compose(x, basis, maps.beta.astype(dtype, copy=False), dtype)
    if warp_tilt:
        y = tilt_warp(y, maps.tilt)
    if clamp:
        np.maximum(y, 0, out=y)
    return y


def check_assets(config: OpticalConfig, assets: SimAssets, height: int, width: int) -> None:
    """Raise :class:`ConfigError` naming the first artefact that does not fit ``config``."""
    b, w, cov = assets.basis, assets.weights, assets.covariance
    if b.size != config.psf_size_px:
        raise ConfigError(f"basis: PSF size {b.size} != configured {config.psf_size_px}")
    if w.basis_digest and w.basis_digest != b.digest:
        raise ConfigError("weights: trained against a different basis (hash mismatch)")
    if w.m != b.m:
        raise ConfigError(f"weights: output size {w.m} != basis size {b.m}")
    if w.k_in != config.zernike_count - 3:
        raise ConfigError(f"weights: input size {w.k_in} != K - 3 = {config.zernike_count - 3}")
    if cov.k != config.zernike_count:
        raise ConfigError(f"covariance: K={cov.k} != configured {config.zernike_count}")
    if cov.config_hash and cov.config_hash != covariance_key(config, cov.g, height, width):
        raise ConfigError("covariance: built for a different geometry or image size (hash mismatch)")


def simulate_frame(x, config: OpticalConfig, assets: SimAssets, seed: int,
                   check: bool = True) -> SimFrame:
    """Render one turbulence-degraded frame of ``x`` (values in [0, 1])."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or (x.ndim == 3 and x.shape[2] not in (1, 3)):
        raise DimensionError(f"expected (H, W) or (H, W, C) with C in (1, 3), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DimensionError("source image contains non-finite values")
    h, w = x.shape[:2]
    if check:
        check_assets(config, assets, h, w)
    cov = assets.covariance
    if not np.isclose(cov.d_over_r0, config.d_over_r0, rtol=1e-12):
        cov = cov.scaled(config.d_over_r0)
    field_ = sample_anchor_field(cov, seed)
    maps = anchor_coefficient_maps(field_, h, w, config, assets.weights)
    y = render(x, maps, assets.basis)
    prov = {"seed": int(seed), "config_hash": config.digest(),
            "weights_hash": assets.weights.digest, "basis_hash": assets.basis.digest,
            "covariance_hash": cov.config_hash}
    return SimFrame(y, prov)
