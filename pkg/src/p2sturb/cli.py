"""Command line entry points: train-basis, train-p2s, simulate, validate, bench."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
import time
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import OpticalConfig
from .errors import AssetError, ConfigError, P2SError

log = logging.getLogger("p2sturb")

_OPTICAL = {f.name for f in dataclasses.fields(OpticalConfig)}


@dataclass
class RunConfig:
    """Everything a command needs. Defaults below are the documented defaults."""

    # optics and turbulence
    aperture_diameter_m: float = 0.1
    focal_length_m: float = 1.0
    wavelength_m: float = 525e-9
    path_length_m: float = 1000.0
    fried_parameter_m: float = 0.05
    pixel_pitch_m: float = 1.3125e-6
    zernike_count: int = 36
    psf_size_px: int = 33
    phase_grid_px: int = 128
    d_over_r0: typing.Optional[float] = None
    # simulator
    grid: int = 16
    basis_count: int = 100
    frames: int = 50
    seed: int = 0
    workers: int = 0
    # assets and paths
    basis: typing.Optional[str] = None
    weights: typing.Optional[str] = None
    cov_cache: typing.Optional[str] = None
    dataset: typing.Optional[str] = None
    input: typing.Optional[str] = None
    out: str = "out"
    # corpus and training
    dataset_count: int = 50000
    d_over_r0_min: float = 1.0
    d_over_r0_max: float = 8.0
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    schedule: str = "cosine"
    hidden: str = "256,256"
    # validation and benchmark
    draws: int = 10000
    exposure_frames: int = 2000
    lucky_pairs: int = 100
    image_size: int = 256
    checks: str = "tilt,exposure,lucky"

    def optical(self) -> OpticalConfig:
        return OpticalConfig(**{k: getattr(self, k) for k in _OPTICAL})

    @property
    def worker_count(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(int(v) for v in self.hidden.split(","))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)


def _convert(name: str, raw: str):
    hint = _HINTS[name]
    base = typing.get_args(hint)[0] if typing.get_origin(hint) is typing.Union else hint
    if base is int:
        v = float(raw)
        if not v.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(v)
    if base is float:
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return v
    return raw


def read_config_file(path) -> tuple:
    """Parse ``key = value`` lines (``#`` starts a comment). Returns (values, problems)."""
    path = Path(path)
    if not path.exists():
        return {}, [f"config file not found: {path}"]
    values, problems = {}, []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{path.name}:{lineno}: expected key = value")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            problems.append(f"{path.name}:{lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            problems.append(f"{path.name}:{lineno}: {key}: {exc}")
    return values, problems


def _resolve_layer(values: dict, d: float, problems: list, source: str) -> None:
    """Turn a ``d_over_r0`` entry into ``fried_parameter_m`` within one source."""
    if values.get("d_over_r0") is None:
        return
    dr = values["d_over_r0"]
    if not dr > 0:
        problems.append(f"{source}: d_over_r0 must be > 0 (got {dr})")
        return
    if "fried_parameter_m" in values:
        implied = d / values["fried_parameter_m"]
        if not math.isclose(implied, dr, rel_tol=1e-9):
            problems.append(f"{source}: d_over_r0 = {dr:g} contradicts aperture_diameter_m / "
                            f"fried_parameter_m = {implied:g}")
            return
    values["fried_parameter_m"] = d / dr


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults < file < flags and validate everything at once.

    Raises a single :class:`ConfigError` listing every problem found.
    """
    problems = []
    file_vals = {}
    if path is not None:
        file_vals, problems = read_config_file(path)
    flag_vals = {k: v for k, v in (overrides or {}).items() if v is not None}
    for k in flag_vals:
        if k not in _FIELDS:
            problems.append(f"unknown option {k!r}")
    merged_d = flag_vals.get("aperture_diameter_m", file_vals.get("aperture_diameter_m",
                                                                  RunConfig.aperture_diameter_m))
    _resolve_layer(file_vals, merged_d, problems, "config file")
    _resolve_layer(flag_vals, merged_d, problems, "flags")
    merged = {**file_vals, **flag_vals}
    merged.pop("d_over_r0", None)
    cfg = None
    if not problems:
        cfg = RunConfig(**merged)
        problems += _check(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    cfg.d_over_r0 = cfg.aperture_diameter_m / cfg.fried_parameter_m
    return cfg


def _check(cfg: RunConfig) -> list:
    try:
        optical = OpticalConfig(**{k: getattr(cfg, k) for k in _OPTICAL})
        problems = []
    except ConfigError:
        optical = None
        problems = OpticalConfig.problems(cfg)
    positive = ("grid", "basis_count", "dataset_count", "epochs", "batch_size", "draws",
                "exposure_frames", "lucky_pairs", "image_size", "learning_rate")
    for name in positive:
        if not getattr(cfg, name) > 0:
            problems.append(f"{name} must be > 0 (got {getattr(cfg, name)})")
    for name in ("frames", "workers", "seed"):
        if getattr(cfg, name) < 0:
            problems.append(f"{name} must be >= 0 (got {getattr(cfg, name)})")
    if not 0 < cfg.d_over_r0_min <= cfg.d_over_r0_max:
        problems.append("need 0 < d_over_r0_min <= d_over_r0_max")
    if cfg.optimizer not in ("adam", "momentum"):
        problems.append(f"optimizer must be adam or momentum (got {cfg.optimizer!r})")
    if cfg.schedule not in ("cosine", "step", "constant"):
        problems.append(f"schedule must be cosine, step or constant (got {cfg.schedule!r})")
    try:
        if any(h < 1 for h in cfg.hidden_sizes):
            raise ValueError
    except ValueError:
        problems.append(f"hidden must be comma separated positive integers (got {cfg.hidden!r})")
    unknown = set(c.strip() for c in cfg.checks.split(",")) - {"tilt", "exposure", "lucky", "color"}
    if unknown:
        problems.append(f"unknown checks {sorted(unknown)}")
    if optical is not None and cfg.basis_count > cfg.psf_size_px ** 2:
        problems.append("basis_count exceeds the PSF pixel count")
    return problems


def write_config_echo(cfg: RunConfig, out_dir: Path) -> Path:
    path = out_dir / "config.resolved"
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items() if v is not None]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# asset helpers

def _need(path, what: str) -> Path:
    if path is None:
        raise AssetError(f"{what}: no path given")
    p = Path(path)
    if not p.exists():
        raise AssetError(f"{what}: file not found: {p}")
    return p


def _file_hash(path: Path) -> str:
    import hashlib
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_covariance(cfg: RunConfig, optical: OpticalConfig, height: int, width: int):
    """Load the covariance cache when its geometry key matches, else build and store it."""
    from .correlation import AnchorGrid, build_spatial_covariance, load_covariance, save_covariance
    from .engine import covariance_key
    key = covariance_key(optical, cfg.grid, height, width)
    if cfg.cov_cache and Path(cfg.cov_cache).exists():
        cov = load_covariance(cfg.cov_cache)
        if cov.config_hash != key:
            raise ConfigError(f"covariance: cache {cfg.cov_cache} was built for a different "
                              "geometry or image size (hash mismatch)")
        return cov
    cov = build_spatial_covariance(AnchorGrid.for_image(cfg.grid, height, width, optical),
                                   optical.with_d_over_r0(1.0)).scaled(optical.d_over_r0)
    if cfg.cov_cache:
        save_covariance(cov, cfg.cov_cache)
    return cov


def _load_assets(cfg: RunConfig, optical: OpticalConfig, height: int, width: int):
    from .basis import load_basis
    from .engine import SimAssets
    from .network import load_weights
    basis = load_basis(_need(cfg.basis, "basis"))
    weights = load_weights(_need(cfg.weights, "weights"))
    cov = _load_covariance(cfg, optical, height, width)
    return SimAssets(basis, weights, cov)


def _asset_hashes(cfg: RunConfig) -> dict:
    out = {}
    for name in ("basis", "weights", "cov_cache", "dataset", "input"):
        p = getattr(cfg, name)
        if p and Path(p).exists():
            out[name] = {"path": str(p), "sha256": _file_hash(Path(p))}
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_train_basis(cfg: RunConfig, out: Path) -> list:
    from .basis import fit_pca, generate_dataset, load_dataset, save_basis, save_dataset
    optical = cfg.optical()
    if cfg.dataset and Path(cfg.dataset).exists():
        ds = load_dataset(cfg.dataset)
        ds_path = Path(cfg.dataset)
    else:
        t0 = time.perf_counter()
        ds = generate_dataset(optical, cfg.dataset_count, (cfg.d_over_r0_min, cfg.d_over_r0_max),
                              cfg.seed, cfg.worker_count)
        ds_path = out / "dataset.p2sd"
        save_dataset(ds, ds_path)
        log.info("generated %d PSFs in %.1f s", ds.count, time.perf_counter() - t0)
    basis = fit_pca(ds, cfg.basis_count)
    save_basis(basis, out / "basis.p2sb")
    print(f"basis: M={basis.m} explained variance {basis.explained_ratio:.5f}")
    return [ds_path.name if ds_path.parent == out else str(ds_path), "basis.p2sb"]


def cmd_train_p2s(cfg: RunConfig, out: Path) -> list:
    from .basis import load_basis, load_dataset
    from .network import TrainConfig, save_weights, train_p2s
    basis = load_basis(_need(cfg.basis, "basis"))
    ds_path = cfg.dataset or str(Path(cfg.basis).with_name("dataset.p2sd"))
    ds = load_dataset(_need(ds_path, "dataset"))
    if ds.k != cfg.zernike_count:
        raise ConfigError(f"dataset: K={ds.k} != configured zernike_count {cfg.zernike_count}")
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                     learning_rate=cfg.learning_rate, optimizer=cfg.optimizer,
                     schedule=cfg.schedule, hidden=cfg.hidden_sizes, seed=cfg.seed)
    w, rep = train_p2s(ds, basis, tc)
    save_weights(w, out / "weights.p2sw")
    with open(out / "training.csv", "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for i, (a, b) in enumerate(zip(rep.train_loss, rep.val_loss), 1):
            fh.write(f"{i},{a:.9g},{b:.9g}\n")
    print(f"weights: val loss {rep.val_loss[-1]:.4g} (mean predictor "
          f"{rep.mean_predictor_val_loss:.4g})")
    return ["weights.p2sw", "training.csv"]


def cmd_simulate(cfg: RunConfig, out: Path) -> list:
    from .engine import simulate_frame
    from .imageio import read_image, write_image
    optical = cfg.optical()
    x = read_image(_need(cfg.input, "input"))
    assets = _load_assets(cfg, optical, *x.shape[:2])
    names = []
    for f in range(cfg.frames):
        frame = simulate_frame(x, optical, assets, cfg.seed + f)
        name = f"frame_{f:04d}.png"
        write_image(out / name, frame.values)
        names.append(name)
    print(f"simulate: wrote {len(names)} frames to {out}")
    return names


def cmd_validate(cfg: RunConfig, out: Path) -> list:
    from .correlation import AnchorGrid, build_spatial_covariance
    from .imageio import write_psf_image
    from .validation import exposure_psfs, interp_comparison, opposite_pair, tilt_statistics
    optical = cfg.optical()
    checks = {c.strip() for c in cfg.checks.split(",")}
    files = []
    if "tilt" in checks:
        grid = AnchorGrid.for_image(cfg.grid, cfg.image_size, cfg.image_size, optical)
        cov = build_spatial_covariance(grid, optical)
        rep = tilt_statistics(cov, optical, cfg.draws, cfg.seed, grid)
        (out / "tilt_stats.csv").write_text(rep.to_csv())
        (out / "tilt_stats.txt").write_text(rep.to_table() + "\n")
        zc, dv = rep.max_relative_deviation()
        print(f"tilt: max rel deviation corr {zc:.4f}, differential variance {dv:.4f}")
        files += ["tilt_stats.csv", "tilt_stats.txt"]
    if "exposure" in checks:
        rep = exposure_psfs(optical, cfg.exposure_frames, cfg.seed)
        with open(out / "exposure_mtf.csv", "w") as fh:
            fh.write("nu,mtf_le,theory_le,mtf_se,theory_se\n")
            for row in zip(rep.frequencies, rep.mtf_le, rep.theory_mtf_le, rep.mtf_se,
                           rep.theory_mtf_se):
                fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
        write_psf_image(out / "psf_le.png", rep.le_psf)
        write_psf_image(out / "psf_se.png", rep.se_psf)
        print(f"exposure: second moments LE {rep.le_second_moment:.3f} SE "
              f"{rep.se_second_moment:.3f}; max LE MTF deviation {rep.max_le_deviation():.4f}")
        files += ["exposure_mtf.csv", "psf_le.png", "psf_se.png"]
    if "lucky" in checks:
        rng = np.random.Generator(np.random.Philox(key=cfg.seed))
        with open(out / "lucky.csv", "w") as fh:
            fh.write("pair,strehl_phase,strehl_space\n")
            for i in range(cfg.lucky_pairs):
                a, b = opposite_pair(optical, rng)
                _, _, (sp, ss) = interp_comparison(a, b, 0.5, optical)
                fh.write(f"{i},{sp:.6f},{ss:.6f}\n")
        files.append("lucky.csv")
    return files


def cmd_bench(cfg: RunConfig, out: Path) -> list:
    from .validation import benchmark
    optical = cfg.optical()
    n = cfg.image_size
    assets = _load_assets(cfg, optical, n, n)
    rep = benchmark(optical, n, cfg.frames, assets, seed=cfg.seed, workers=cfg.worker_count)
    table = rep.to_table()
    (out / "bench.txt").write_text(table + "\n")
    print(table)
    return ["bench.txt"]


COMMANDS = {
    "train-basis": cmd_train_basis,
    "train-p2s": cmd_train_p2s,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2sturb",
                                     description="Phase-to-space turbulence simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--frames", type=int)
        p.add_argument("--out")
        p.add_argument("--workers", type=int)
        p.add_argument("--d-over-r0", dest="d_over_r0", type=float)
        p.add_argument("--grid", type=int)
        p.add_argument("--basis")
        p.add_argument("--weights")
        p.add_argument("--cov-cache", dest="cov_cache")
        p.add_argument("--input")
        p.add_argument("--dataset")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
    return parser


def _flag_overrides(ns) -> dict:
    flags = {k: getattr(ns, k) for k in ("seed", "frames", "out", "workers", "d_over_r0", "grid",
                                         "basis", "weights", "cov_cache", "input", "dataset")}
    problems = []
    for item in ns.set:
        if "=" not in item:
            problems.append(f"--set expects KEY=VALUE (got {item!r})")
            continue
        key, raw = (s.strip() for s in item.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            flags[key] = _convert(key, raw)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return flags


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(ns.config, _flag_overrides(ns))
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_config_echo(cfg, out)
        outputs = COMMANDS[ns.command](cfg, out)
        from .imageio import write_manifest
        write_manifest(out, ns.command, cfg.to_dict(),
                       {"seed": cfg.seed, "frame_seeds": "seed + frame index"},
                       _asset_hashes(cfg), ["config.resolved", *outputs],
                       {"optical_digest": cfg.optical().digest(), "workers": cfg.worker_count})
    except P2SError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: code={exc.exit_code} kind={type(exc).__name__} message={msg}",
              file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
