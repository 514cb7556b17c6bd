"""Acceptance gate.

Each test prints one ``criterion N: PASS|FAIL ...`` line (also repeated in the
pytest terminal summary) and asserts the verdict. Tolerances are pinned as
module constants. Run directly with ``python tests/test_acceptance.py`` or via
pytest; the production assets are built and cached on first use.
"""

import dataclasses
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE_LINES, build_full_assets  # noqa: E402

from p2sturb import _kernels  # noqa: E402
from p2sturb.basis import generate_dataset, project_psf, reconstruct_psf  # noqa: E402
from p2sturb.config import OpticalConfig  # noqa: E402
from p2sturb.correlation import AnchorGrid, build_spatial_covariance  # noqa: E402
from p2sturb.engine import (SimAssets, anchor_coefficient_maps, interpolate_alpha, render,  # noqa: E402
                            sample_anchor_field, simulate_frame)
from p2sturb.network import MlpWeights, loss_and_grad, p2s_forward_batch  # noqa: E402
from p2sturb.optics import noll_covariance  # noqa: E402
from p2sturb.validation import (benchmark, brute_force_frame, color_comparison,  # noqa: E402
                                exact_mode_check, exposure_psfs, interp_comparison,
                                opposite_pair, tilt_statistics)

# criterion 1
C1_DRAWS, C1_SIGMAS, C1_SECONDS = 100_000, 3.0, 60.0
# criterion 2
C2_DRAWS, C2_MAX_DEV, C2_FAR_SIGMAS = 10_000, 0.05, 3.0
# criterion 3
C3_FRAMES, C3_D_OVER_R0, C3_MTF_ABS, C3_NU_MAX, C3_SECONDS = 2000, 3.0, 0.05, 0.8, 600.0
C3_MODES = 231  # radial orders 0..20, see README
# criterion 4
C4_REL_L2, C4_EXACT_SLACK = 0.05, 1e-6
# criterion 5
C5_FLOOR_FACTOR, C5_GRAD_RTOL, C5_HOLDOUT = 1.5, 1e-4, 2000
# criterion 6
C6_PAIRS, C6_RMS, C6_PHASE_MIN, C6_SPACE_MAX = 100, 2.0, 0.9, 0.6
# criterion 7
C7_SECONDS, C7_SPEEDUP, C7_FRAMES = 0.35, 100.0, 10
# criterion 8: regression value recorded on the first run (seed 0, 32x32 scene 8)
C8_PINNED_MAX_REL_ERROR = 0.0324700732
C8_RTOL = 1e-6
C8_WAVELENGTHS = (450e-9, 540e-9, 570e-9)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def scene(h: int, w: int, seed: int, channels: int = 0) -> np.ndarray:
    """Smooth random texture with a block of hard-edged bars, values in [0, 1]."""
    rng = np.random.Generator(np.random.Philox(key=1000 + seed))
    out = np.empty((h, w, max(channels, 1)))
    k = np.fft.fftfreq(h)[:, None] ** 2 + np.fft.fftfreq(w)[None, :] ** 2
    bars = np.zeros((h, w))
    bars[: h // 2] = (np.arange(w) // 4) % 2
    for c in range(out.shape[2]):
        smooth = np.real(np.fft.ifft2(np.fft.fft2(rng.uniform(size=(h, w))) * np.exp(-k / 0.02)))
        smooth = (smooth - smooth.min()) / (np.ptp(smooth) or 1.0)
        out[..., c] = 0.6 * smooth + 0.4 * bars
    return out if channels else out[..., 0]


@pytest.fixture(scope="module")
def cfg():
    return OpticalConfig()


@pytest.fixture(scope="module")
def production(cfg):
    return build_full_assets(cfg)


# ---------------------------------------------------------------------------

def modal_covariance_z(cfg, draws=C1_DRAWS, seed=0):
    c = cfg.with_d_over_r0(2.0)
    cov = build_spatial_covariance(AnchorGrid.for_image(1, 8, 8, c), c)
    t0 = time.perf_counter()
    a = cov.sample_many(seed, draws)[:, 0, 0]
    emp = a.T @ a / draws
    elapsed = time.perf_counter() - t0
    rz = noll_covariance(cfg.zernike_count, 2.0).matrix
    se = np.sqrt((np.outer(np.diag(rz), np.diag(rz)) + rz ** 2) / draws)
    iu = np.triu_indices(cfg.zernike_count - 1)
    z = ((emp - rz)[1:, 1:] / se[1:, 1:])[iu]  # piston has zero variance
    return z, elapsed


def test_c1_modal_covariance(cfg):
    z, elapsed = modal_covariance_z(cfg)
    n_out = int(np.sum(np.abs(z) > C1_SIGMAS))
    # Calibrated reading: exceedance count under Binomial(n, P(|N|>3)) and a
    # Bonferroni bound on the largest |z|.
    p3 = 2 * stats.norm.sf(C1_SIGMAS)
    p_count = float(stats.binom.sf(n_out - 1, z.size, p3))
    z_bonf = float(stats.norm.isf(0.0005 / z.size))
    calibrated = p_count > 1e-3 and np.abs(z).max() < z_bonf
    ok = n_out == 0 and elapsed < C1_SECONDS
    report(1, ok, f"{n_out}/{z.size} entries beyond {C1_SIGMAS:g} SE (max |z| {np.abs(z).max():.2f}), "
                  f"{elapsed:.2f} s; calibrated: P(count>={n_out})={p_count:.2f}, "
                  f"Bonferroni limit {z_bonf:.2f} -> {'consistent' if calibrated else 'INCONSISTENT'}")
    assert calibrated
    assert ok


def test_c2_tilt_statistics(cfg):
    grid = AnchorGrid.regular(8, 2e-4)
    cov = build_spatial_covariance(grid, cfg)
    rep = tilt_statistics(cov, cfg, C2_DRAWS, 0, grid)
    dev_corr, dev_dvar = rep.max_relative_deviation()
    zero = rep.diff_tilt_var[int(np.argmin(rep.separations))]
    # far field: two anchors so far apart the tilt kernel has decayed to ~0.3%
    far_grid = AnchorGrid.regular(2, 5000.0)
    far_cov = build_spatial_covariance(far_grid, cfg)
    far = tilt_statistics(far_cov, cfg, C2_DRAWS, 1, far_grid)
    i = int(np.argmax(far.separations))
    dvar_far, point = far.diff_tilt_var[i], far.point_variance
    # SE of a variance estimate of a 2-component Gaussian mean: sqrt(2/(2n)) * value
    se_far = 2 * point * math.sqrt(1.0 / C2_DRAWS)
    far_ok = abs(dvar_far - 2 * point) <= C2_FAR_SIGMAS * se_far
    ok = dev_corr <= C2_MAX_DEV and dev_dvar <= C2_MAX_DEV and zero == 0.0 and far_ok
    report(2, ok, f"max rel dev corr {dev_corr:.4f}, dvar {dev_dvar:.4f} (<= {C2_MAX_DEV}); "
                  f"dvar(0)={zero:g}; far dvar/(2 var)={dvar_far / (2 * point):.4f} "
                  f"(theory rho {far.theory_z_tilt[i]:.4f}, {C2_FAR_SIGMAS:g} SE = "
                  f"{C2_FAR_SIGMAS * se_far / (2 * point):.4f})")
    assert ok


def test_c3_exposures(cfg):
    c = dataclasses.replace(cfg, zernike_count=C3_MODES).with_d_over_r0(C3_D_OVER_R0)
    t0 = time.perf_counter()
    rep = exposure_psfs(c, C3_FRAMES, 0)
    elapsed = time.perf_counter() - t0
    dev = rep.max_le_deviation(C3_NU_MAX)
    le, se = rep.le_second_moment, rep.se_second_moment
    ok = le >= se and dev <= C3_MTF_ABS and elapsed < C3_SECONDS
    report(3, ok, f"K={C3_MODES}: LE moment {le:.1f} >= SE {se:.1f}; max |LE MTF - theory| "
                  f"{dev:.4f} (<= {C3_MTF_ABS}) on [0, {C3_NU_MAX}]; {elapsed:.0f} s")
    assert ok


def test_c4_oracle_equivalence(cfg, production):
    _, basis, weights = production
    worst, worst_case = 0.0, None
    exact_ok, exact_lines = True, []
    for size in (32, 64):
        grid = AnchorGrid.for_image(16, size, size, cfg)
        base = build_spatial_covariance(grid, cfg.with_d_over_r0(1.0))
        for dr in (1.0, 2.0, 4.0):
            c = cfg.with_d_over_r0(dr)
            cov = base.scaled(dr)
            for seed in range(3):
                x = scene(size, size, seed)
                field_ = sample_anchor_field(cov, seed)
                dense = interpolate_alpha(field_.coeffs, size, size)
                maps = anchor_coefficient_maps(field_, size, size, c, weights)
                fast = render(x, maps, basis)
                ref = brute_force_frame(x, dense, c).values
                err = float(np.linalg.norm(fast - ref) / np.linalg.norm(ref))
                if err > worst:
                    worst, worst_case = err, (size, dr, seed)
                if seed == 0:
                    ex = exact_mode_check(x, dense, c, basis)
                    good = ex.error <= ex.bound + C4_EXACT_SLACK
                    exact_ok &= good
                    exact_lines.append(f"{size}px D/r0={dr:g}: {ex.error:.3g}<={ex.bound:.3g}")
    ok = worst <= C4_REL_L2 and exact_ok
    report(4, ok, f"worst rel l2 {worst:.4f} (<= {C4_REL_L2}) at size/D-r0/seed {worst_case}; "
                  f"exact mode {'within' if exact_ok else 'OUTSIDE'} bound [" + "; ".join(exact_lines) + "]")
    assert ok


def _grad_check(w: MlpWeights, x, y, eps=1e-6, probes=6):
    w = dataclasses.replace(w, input_scale=w.input_scale.astype(np.float64),
                            w=[a.astype(np.float64) for a in w.w], b=[a.astype(np.float64) for a in w.b])
    _, gw, gb = loss_and_grad(w, x, y)
    rng = np.random.default_rng(0)
    worst = 0.0
    for params, grads in ((w.w, gw), (w.b, gb)):
        for p, g in zip(params, grads):
            for _ in range(probes):
                idx = tuple(rng.integers(0, s) for s in p.shape)
                old = p[idx]
                p[idx] = old + eps
                lp = loss_and_grad(w, x, y)[0]
                p[idx] = old - eps
                lm = loss_and_grad(w, x, y)[0]
                p[idx] = old
                fd = (lp - lm) / (2 * eps)
                worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
    return worst


def test_c5_training_quality(cfg, production):
    ds, basis, weights = production
    hold = generate_dataset(cfg, C5_HOLDOUT, ds.d_over_r0_range, seed=12345)
    h = hold.psfs.astype(np.float64)
    norm = np.sqrt(np.sum(h ** 2, axis=(1, 2)))

    def rel(beta):
        return np.sqrt(np.sum((reconstruct_psf(beta, basis) - h) ** 2, axis=(1, 2))) / norm

    floor = float(np.median(rel(project_psf(h, basis))))
    net = float(np.median(rel(p2s_forward_batch(hold.alpha_high, weights).astype(np.float64))))
    mean_beta = project_psf(ds.psfs[:10000].astype(np.float64), basis).mean(0)
    mean_pred = float(np.median(rel(np.broadcast_to(mean_beta, (len(h), basis.m)))))
    rng = np.random.default_rng(5)
    xs = hold.alpha_high[:8].astype(np.float64)
    ys = rng.normal(size=(8, basis.m))
    grad = _grad_check(weights, xs, ys)
    ratio = net / floor
    ok = ratio <= C5_FLOOR_FACTOR and net < mean_pred and grad <= C5_GRAD_RTOL
    report(5, ok, f"median rel error {net:.4f} = {ratio:.2f}x PCA floor {floor:.4f} "
                  f"(<= {C5_FLOOR_FACTOR}x); mean-beta predictor {mean_pred:.4f} "
                  f"({'beaten' if net < mean_pred else 'NOT beaten'}); gradient rel err {grad:.1e}")
    assert net < mean_pred and grad <= C5_GRAD_RTOL
    assert ratio <= C5_FLOOR_FACTOR


def test_c6_lucky_interpolation(cfg):
    rng = np.random.Generator(np.random.Philox(key=6))
    phase, space = [], []
    for _ in range(C6_PAIRS):
        a, b = opposite_pair(cfg, rng, C6_RMS)
        _, _, (sp, ss) = interp_comparison(a, b, 0.5, cfg)
        phase.append(sp)
        space.append(ss)
    ok = min(phase) >= C6_PHASE_MIN and max(space) <= C6_SPACE_MAX
    report(6, ok, f"{C6_PAIRS} pairs: min phase-midpoint Strehl {min(phase):.3f} (>= {C6_PHASE_MIN}), "
                  f"max space-midpoint Strehl {max(space):.3f} (<= {C6_SPACE_MAX})")
    assert ok


def test_c7_performance(cfg, production):
    _, basis, weights = production
    size = 256
    cov = build_spatial_covariance(AnchorGrid.for_image(16, size, size, cfg), cfg)
    rep = benchmark(cfg, size, C7_FRAMES, SimAssets(basis, weights, cov))
    ok = rep.fast_seconds_per_frame <= C7_SECONDS and rep.speedup >= C7_SPEEDUP
    report(7, ok, f"{rep.fast_seconds_per_frame:.3f} s/frame (<= {C7_SECONDS}) on "
                  f"{_cpu_note()}, backend {_kernels.backend()}; oracle "
                  f"{rep.oracle_seconds_per_frame:.1f} s/frame (tile-extrapolated), "
                  f"speedup {rep.speedup:.0f}x (>= {C7_SPEEDUP:g}x)")
    assert ok


def _cpu_note() -> str:
    import os
    n = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    return f"{n} CPU core(s)"


def test_c8_color_fidelity(cfg, production):
    _, basis, weights = production
    c = cfg.with_d_over_r0(2.0)
    rgb = scene(32, 32, 8, channels=3)
    res = color_comparison(rgb, c, C8_WAVELENGTHS, seed=0)
    value = res.max_rel_error
    if C8_PINNED_MAX_REL_ERROR is None:
        pinned_ok, pin_note = True, "first run, value to pin"
    else:
        pinned_ok = abs(value - C8_PINNED_MAX_REL_ERROR) <= C8_RTOL * C8_PINNED_MAX_REL_ERROR
        pin_note = f"pinned {C8_PINNED_MAX_REL_ERROR:.9g}"
    gray = scene(64, 64, 9)
    cov = build_spatial_covariance(AnchorGrid.for_image(16, 64, 64, c), c)
    y = simulate_frame(np.repeat(gray[..., None], 3, axis=2), c, SimAssets(basis, weights, cov), 3).values
    bitwise = bool(np.array_equal(y[..., 0], y[..., 1]) and np.array_equal(y[..., 1], y[..., 2]))
    ok = pinned_ok and bitwise
    report(8, ok, f"max rel error single-PSF vs 3-wavelength {value:.9g} ({pin_note}); "
                  f"gray channels bitwise equal: {bitwise}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
