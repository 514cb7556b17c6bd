"""Raster input/output and run manifests."""

from __future__ import annotations

import json
import platform
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AssetError, FormatError


def read_image(path) -> np.ndarray:
    """Load PNG/PGM/TIFF as float64 in [0, 1]; gray gives (H, W), colour (H, W, 3)."""
    path = Path(path)
    if not path.exists():
        raise AssetError(f"input image not found: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc
    return np.clip(arr, 0.0, 1.0)


def write_image(path, values, bits: int = 16) -> None:
    """Write a [0, 1] image; 16-bit gray, or 8-bit RGB for colour."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    path = Path(path)
    if v.ndim == 3:
        Image.fromarray(np.round(v * 255).astype(np.uint8), "RGB").save(path)
    elif bits == 16:
        Image.fromarray(np.round(v * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(v * 255).astype(np.uint8), "L").save(path)


def write_psf_image(path, psf) -> None:
    """PSF as a peak-normalised 16-bit grayscale raster."""
    p = np.asarray(psf, dtype=np.float64)
    write_image(path, p / p.max() if p.max() > 0 else p, bits=16)


def write_manifest(out_dir, command: str, config: dict, seeds: dict, assets: dict,
                   outputs: list, extra: dict | None = None) -> Path:
    import numpy
    import scipy
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "assets": assets,
        "outputs": outputs,
        "versions": {"python": platform.python_version(), "numpy": numpy.__version__,
                     "scipy": scipy.__version__},
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
