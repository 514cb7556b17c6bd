"""PSF training corpus and the principal-component PSF basis."""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import OpticalConfig
from .errors import ConfigError, DimensionError, FormatError, UnsupportedVersionError
from .optics import (ApertureGrid, Psf, ZernikeBasisSet, center_psf, noll_covariance,
                     psd_sqrt, psf_batch)

DATASET_MAGIC = b"P2SD"
DATASET_VERSION = 1
BASIS_MAGIC = b"P2SB"
BASIS_VERSION = 1
_CHUNK = 128


def entry_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for corpus entry ``index``; schedule independent."""
    return np.random.Generator(np.random.Philox(key=(int(seed) & (2 ** 64 - 1)) + (int(index) << 64)))


@dataclass(eq=False)
class PsfDataset:
    """Centred PSFs with their high-order Zernike labels (modes 4..K)."""

    alpha_high: np.ndarray = field(repr=False)  # (N, K-3) float32
    psfs: np.ndarray = field(repr=False)  # (N, S, S) float32
    d_over_r0: np.ndarray = field(repr=False)  # (N,)
    d_over_r0_range: tuple
    seed: int

    @property
    def count(self) -> int:
        return self.psfs.shape[0]

    @property
    def size(self) -> int:
        return self.psfs.shape[-1]

    @property
    def k(self) -> int:
        return self.alpha_high.shape[1] + 3

    def subset(self, idx) -> "PsfDataset":
        return PsfDataset(self.alpha_high[idx], self.psfs[idx], self.d_over_r0[idx],
                          self.d_over_r0_range, self.seed)


def _draw_coefficients(config: OpticalConfig, lo: float, hi: float, seed: int, indices):
    k = config.zernike_count
    unit = psd_sqrt(noll_covariance(k, 1.0).matrix)
    alphas = np.empty((len(indices), k))
    ratios = np.empty(len(indices))
    for row, i in enumerate(indices):
        rng = entry_rng(seed, i)
        dr = rng.uniform(lo, hi) if hi > lo else lo
        z = rng.standard_normal(k)
        alphas[row] = unit @ z * dr ** (5 / 6)
        ratios[row] = dr
    alphas[:, :3] = 0.0
    return alphas, ratios


def _render_chunk(args):
    config, lo, hi, seed, start, stop = args
    grid = ApertureGrid.create(config.phase_grid_px)
    modes = ZernikeBasisSet.create(grid, config.zernike_count).modes
    alphas, ratios = _draw_coefficients(config, lo, hi, seed, range(start, stop))
    phases = np.tensordot(alphas, modes, axes=(1, 0))
    raw = psf_batch(phases, grid, config.psf_size_px, config.oversampling)
    psfs = np.empty(raw.shape, dtype=np.float32)
    for n in range(raw.shape[0]):
        psfs[n] = center_psf(raw[n])[0]
    return alphas[:, 3:].astype(np.float32), psfs, ratios


def generate_dataset(config: OpticalConfig, count: int, d_over_r0_range=(1.0, 8.0),
                     seed: int = 0, workers: int = 1) -> PsfDataset:
    """Draw ``count`` turbulent pupils and their centred PSFs.

    D/r0 is uniform over the range, coefficients follow ``R_Z(D/r0)`` with
    piston and both tilts zeroed. Entry ``n`` depends only on ``(seed, n)``.
    """
    lo, hi = map(float, d_over_r0_range)
    if count < 1:
        raise ConfigError(f"dataset count must be >= 1 (got {count})")
    if not (0 < lo <= hi):
        raise ConfigError(f"invalid D/r0 range ({lo}, {hi})")
    jobs = [(config, lo, hi, seed, s, min(s + _CHUNK, count)) for s in range(0, count, _CHUNK)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_render_chunk, jobs))
    else:
        parts = [_render_chunk(j) for j in jobs]
    return PsfDataset(np.concatenate([p[0] for p in parts]),
                      np.concatenate([p[1] for p in parts]),
                      np.concatenate([p[2] for p in parts]), (lo, hi), int(seed))


def save_dataset(ds: PsfDataset, path) -> None:
    """Header then interleaved float32 records ``(alpha_high, psf)``."""
    n, s, k = ds.count, ds.size, ds.k
    rec = np.concatenate([ds.alpha_high.astype("<f4"),
                          ds.psfs.reshape(n, s * s).astype("<f4")], axis=1)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HIII", DATASET_VERSION, n, k, s))
        fh.write(struct.pack("<ddQ", *ds.d_over_r0_range, ds.seed & (2 ** 64 - 1)))
        fh.write(np.ascontiguousarray(ds.d_over_r0, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(rec).tobytes())


def load_dataset(path) -> PsfDataset:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a PSF dataset (bad magic)")
    try:
        version, n, k, s = struct.unpack_from("<HIII", data, 4)
        if version != DATASET_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported dataset version {version}")
        lo, hi, seed = struct.unpack_from("<ddQ", data, 18)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated dataset header") from exc
    off = 42
    width = (k - 3) + s * s
    need = off + 8 * n + 4 * n * width
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}")
    ratios = np.frombuffer(data, "<f8", n, off).copy()
    rec = np.frombuffer(data, "<f4", n * width, off + 8 * n).reshape(n, width)
    return PsfDataset(rec[:, :k - 3].astype(np.float32), rec[:, k - 3:].reshape(n, s, s).astype(np.float32),
                      ratios, (lo, hi), int(seed))


# ---------------------------------------------------------------------------
# PCA basis

@dataclass(eq=False)
class PsfBasis:
    """Mean PSF plus ``M`` orthonormal eigen-PSFs, largest variance first."""

    mean_psf: np.ndarray = field(repr=False)  # (S, S)
    components: np.ndarray = field(repr=False)  # (M, S, S)
    eigenvalues: np.ndarray = field(repr=False)  # (M,)
    explained_ratio: float = float("nan")

    @property
    def m(self) -> int:
        return self.components.shape[0]

    @property
    def size(self) -> int:
        return self.mean_psf.shape[0]

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.mean_psf, self.eigenvalues, self.components):
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()

    def truncated(self, m: int) -> "PsfBasis":
        if not 1 <= m <= self.m:
            raise DimensionError(f"cannot truncate {self.m} components to {m}")
        return PsfBasis(self.mean_psf, self.components[:m], self.eigenvalues[:m], float("nan"))


def fit_pca(ds: PsfDataset, m: int) -> PsfBasis:
    """Mean-centred PCA of the vectorised corpus PSFs.

    Direct eigendecomposition of the ``S^2 x S^2`` covariance. Each component
    is signed so its largest-magnitude entry is positive. Stored values are
    rounded to float32 so the in-memory basis equals its serialised form.
    """
    s = ds.size
    n = ds.count
    if not 1 <= m <= min(n, s * s):
        raise DimensionError(f"M={m} must lie in [1, min(count={n}, S^2={s * s})]")
    if s * s > 4096:
        raise DimensionError(f"direct PCA limited to S^2 <= 4096 (S={s})")
    x = ds.psfs.reshape(n, s * s).astype(np.float64)
    mean = x.mean(axis=0)
    cov = np.zeros((s * s, s * s))
    for start in range(0, n, 4096):
        xc = x[start:start + 4096] - mean
        cov += xc.T @ xc
    cov /= n
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, v = np.clip(w[order], 0.0, None), v[:, order]
    comps = v[:, :m].T
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(m), pivot])[:, None]
    total = w.sum()
    ratio = float(w[:m].sum() / total) if total > 0 else 1.0
    comps = comps.astype(np.float32).astype(np.float64)
    return PsfBasis(mean.reshape(s, s).astype(np.float32).astype(np.float64),
                    comps.reshape(m, s, s), w[:m].astype(np.float32).astype(np.float64), ratio)


def project_psf(h, basis: PsfBasis) -> np.ndarray:
    """Basis coefficients ``beta_m = <h - mean, phi_m>``; works on stacks."""
    vals = h.values if isinstance(h, Psf) else np.asarray(h, dtype=float)
    s = basis.size
    if vals.shape[-2:] != (s, s):
        raise DimensionError(f"PSF shape {vals.shape[-2:]} does not match basis size {s}")
    flat = (vals - basis.mean_psf).reshape(*vals.shape[:-2], s * s)
    return flat @ basis.components.reshape(basis.m, s * s).T


def reconstruct_psf(beta, basis: PsfBasis) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape[-1] != basis.m:
        raise DimensionError(f"beta has {beta.shape[-1]} entries, basis has {basis.m}")
    return basis.mean_psf + np.tensordot(beta, basis.components, axes=([-1], [0]))


def save_basis(basis: PsfBasis, path) -> None:
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(struct.pack("<HII", BASIS_VERSION, basis.m, basis.size))
        fh.write(struct.pack("<d", basis.explained_ratio))
        for a in (basis.mean_psf, basis.eigenvalues, basis.components):
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_basis(path) -> PsfBasis:
    data = Path(path).read_bytes()
    if data[:4] != BASIS_MAGIC:
        raise FormatError(f"{path}: not a PSF basis (bad magic)")
    try:
        version, m, s = struct.unpack_from("<HII", data, 4)
        if version != BASIS_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported basis version {version}")
        (ratio,) = struct.unpack_from("<d", data, 14)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated basis header") from exc
    off = 22
    need = off + 4 * (s * s + m + m * s * s)
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}")
    vals = np.frombuffer(data, "<f4", offset=off).astype(np.float64)
    mean = vals[:s * s].reshape(s, s)
    eig = vals[s * s:s * s + m]
    comps = vals[s * s + m:].reshape(m, s, s)
    return PsfBasis(mean, comps, eig, ratio)
