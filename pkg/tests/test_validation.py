import numpy as np
import pytest
from scipy import ndimage

from p2sturb.config import OpticalConfig
from p2sturb.correlation import AnchorGrid, build_spatial_covariance
from p2sturb.engine import SimAssets
from p2sturb.errors import ConfigError, DimensionError, SizeGuardError
from p2sturb.optics import ApertureGrid, ZernikeBasisSet, diffraction_limited_psf, psf_batch
from p2sturb.validation import (benchmark, brute_force_frame, color_comparison, diffraction_mtf,
                                exposure_psfs, interp_comparison, opposite_pair,
                                radial_mtf, radial_second_moment, strehl, theory_mtf,
                                tilt_statistics)


def test_oracle_zero_turbulence_is_diffraction_blur(config, backend):
    x = np.random.default_rng(0).random((16, 18))
    y = brute_force_frame(x, np.zeros((16, 18, config.zernike_count)), config).values
    k = diffraction_limited_psf(ApertureGrid.create(config.phase_grid_px), 33, config.oversampling)
    assert np.allclose(y, ndimage.convolve(x, k, mode="nearest"), atol=1e-12)


def test_oracle_constant_field_is_invariant_convolution(config):
    x = np.random.default_rng(1).random((14, 14))
    a = np.random.default_rng(2).normal(size=config.zernike_count) * 0.3
    a[0] = 0
    dense = np.broadcast_to(a, (14, 14, config.zernike_count))
    frame = brute_force_frame(x, dense, config)
    s = frame.provenance["oracle_psf_size"]
    grid = ApertureGrid.create(config.phase_grid_px)
    modes = ZernikeBasisSet.create(grid, config.zernike_count).modes
    k = psf_batch(np.tensordot(a, modes, 1), grid, s, config.oversampling)
    assert np.allclose(frame.values, ndimage.convolve(x, k, mode="nearest"), atol=1e-12)


def test_oracle_size_guard(config):
    dense = np.zeros((20, 20, config.zernike_count))
    with pytest.raises(SizeGuardError):
        brute_force_frame(np.zeros((20, 20)), dense, config, max_pixels=100)
    y = brute_force_frame(np.ones((20, 20)), dense, config, max_pixels=100, allow_large=True)
    assert np.allclose(y.values, 1.0)
    with pytest.raises(DimensionError):
        brute_force_frame(np.zeros((20, 20)), dense[:10], config)


@pytest.fixture(scope="module")
def tilt_cov(config):
    grid = AnchorGrid.regular(3, 2e-4)
    return grid, build_spatial_covariance(grid, config)


def test_tilt_statistics_limits(config, tilt_cov):
    grid, cov = tilt_cov
    rep = tilt_statistics(cov, config, 400, 1, grid)
    n = len(rep.separations)
    assert all(len(v) == n for v in (rep.z_tilt_corr, rep.diff_tilt_var, rep.theory_z_tilt,
                                     rep.theory_diff_tilt, rep.pair_counts))
    assert rep.separations[0] == 0 and rep.diff_tilt_var[0] == 0 and rep.theory_diff_tilt[0] == 0
    assert rep.z_tilt_corr[0] == pytest.approx(1.0)
    assert min(rep.diff_tilt_var) >= 0
    assert "separation_rad" in rep.to_csv() and "corr" in rep.to_table()
    with pytest.raises(ConfigError):
        tilt_statistics(cov, config, 10, 1, grid)


def test_exposures_diffraction_limit():
    cfg = OpticalConfig().with_d_over_r0(0.01)
    rep = exposure_psfs(cfg, 100, 0, size=33)
    dl = diffraction_limited_psf(ApertureGrid.create(cfg.phase_grid_px), 33)
    # centring resamples bilinearly, which slightly smooths sub-pixel shifts
    assert np.max(np.abs(rep.le_psf - dl)) < 1e-2 * dl.max()
    assert np.max(np.abs(rep.se_psf - dl)) < 1e-2 * dl.max()
    assert rep.le_psf.sum() == pytest.approx(1) and rep.se_psf.sum() == pytest.approx(1)
    with pytest.raises(ConfigError):
        exposure_psfs(cfg, 50, 0)


def test_exposure_spread_ordering(config):
    rep = exposure_psfs(config.with_d_over_r0(3.0), 100, 3, size=65)
    assert rep.le_second_moment >= rep.se_second_moment


def test_theory_mtf_limits():
    nu = np.linspace(0, 1, 21)
    assert np.allclose(theory_mtf(nu, 1e-8), diffraction_mtf(nu))
    assert np.allclose(theory_mtf(nu, 3.0, short=True)[[0, -1]], [1.0, 0.0])
    assert np.all(theory_mtf(nu, 3.0, short=True) >= theory_mtf(nu, 3.0) - 1e-15)


def test_radial_mtf_of_diffraction_psf():
    dl = diffraction_limited_psf(ApertureGrid.create(128), 257)
    nu = np.linspace(0, 0.9, 10)
    assert np.allclose(radial_mtf(dl, 4.0, nu), diffraction_mtf(nu), atol=0.01)


def test_second_moment():
    h = np.zeros((5, 5))
    h[2, 2] = 1
    assert radial_second_moment(h) == 0
    h[2, 4] = 1
    assert radial_second_moment(h) == pytest.approx(2.0)


def test_interp_opposite_phases_cancel(config):
    rng = np.random.default_rng(0)
    a, _ = opposite_pair(config, rng, 1.5, 0.0)
    hp, hs, (sp, ss) = interp_comparison(a, -a, 0.5, config)
    assert sp == pytest.approx(1.0, abs=1e-12) and ss < 1
    assert hs.values.sum() == pytest.approx(1.0)


def test_interp_endpoint(config):
    rng = np.random.default_rng(1)
    a, b = opposite_pair(config, rng)
    hp, hs, _ = interp_comparison(a, b, 0.0, config)
    assert np.allclose(hp.values, hs.values, atol=1e-15)
    with pytest.raises(ConfigError):
        interp_comparison(a, b, 1.5, config)
    with pytest.raises(DimensionError):
        interp_comparison(a[:5], b, 0.5, config)


def test_opposite_pair_shape(config):
    a, b = opposite_pair(config, np.random.default_rng(3), 2.0, 0.2)
    assert np.linalg.norm(a) == pytest.approx(2.0) and np.all(a[:3] == 0)
    assert np.linalg.norm(a + b) == pytest.approx(0.2)


def test_strehl_of_diffraction_limit(config):
    dl = diffraction_limited_psf(ApertureGrid.create(128), 33)
    assert strehl(dl, config) == pytest.approx(1.0)


def test_colour_identical_wavelengths(config):
    x = np.random.default_rng(2).random((12, 12, 3))
    cfg = config.with_d_over_r0(2.0)
    w = cfg.wavelength_m
    rep = color_comparison(x, cfg, [w, w, w], seed=3, g=2)
    assert rep.max_rel_error == 0 and np.all(rep.error_map == 0)
    with pytest.raises(ConfigError):
        color_comparison(x, config.with_d_over_r0(9.0), [w, w, w], 0)
    with pytest.raises(DimensionError):
        color_comparison(x[..., 0], cfg, [w, w, w], 0)


def test_benchmark_zero_frames(config, small_assets):
    _, basis, w, _ = small_assets
    rep = benchmark(config, 64, 0, SimAssets(basis, w, None))
    assert rep.fast_seconds_per_frame is None and rep.speedup is None
    assert "n/a" in rep.to_table()


def test_benchmark_small(config, small_assets):
    _, basis, w, _ = small_assets
    cov = build_spatial_covariance(AnchorGrid.for_image(2, 40, 40, config), config)
    rep = benchmark(config, 40, 2, SimAssets(basis, w, cov), oracle_tile=8)
    assert rep.oracle_extrapolated and rep.speedup > 1
    assert len(rep.fast_times) == 2
