"""Physical configuration of the imaging system.

The default parameter set is chosen so that the image pixel pitch equals the
PSF sampling of a 4x zero padded pupil transform, i.e.
``wavelength * focal_length / (aperture * pixel_pitch) == 4``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class OpticalConfig:
    aperture_diameter_m: float = 0.1
    focal_length_m: float = 1.0
    wavelength_m: float = 525e-9
    path_length_m: float = 1000.0
    fried_parameter_m: float = 0.05
    pixel_pitch_m: float = 1.3125e-6
    zernike_count: int = 36
    psf_size_px: int = 33
    phase_grid_px: int = 128

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid optical configuration: " + "; ".join(problems))

    def problems(self):
        out = []
        for name in ("aperture_diameter_m", "focal_length_m", "wavelength_m",
                     "path_length_m", "fried_parameter_m", "pixel_pitch_m"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                out.append(f"{name} must be a finite positive number (got {v!r})")
        if not isinstance(self.zernike_count, int) or self.zernike_count < 4:
            out.append(f"zernike_count must be an integer >= 4 (got {self.zernike_count!r})")
        s = self.psf_size_px
        if not isinstance(s, int) or s < 1 or s % 2 == 0:
            out.append(f"psf_size_px must be a positive odd integer (got {s!r})")
        p = self.phase_grid_px
        if not isinstance(p, int) or p < 8:
            out.append(f"phase_grid_px must be an integer >= 8 (got {p!r})")
        elif isinstance(s, int) and s > p:
            out.append(f"psf_size_px ({s}) must not exceed phase_grid_px ({p})")
        return out

    @property
    def d_over_r0(self) -> float:
        return self.aperture_diameter_m / self.fried_parameter_m

    @property
    def oversampling(self) -> float:
        """PSF samples per lambda/D; the effective zero padding factor."""
        return self.wavelength_m * self.focal_length_m / (
            self.aperture_diameter_m * self.pixel_pitch_m)

    @property
    def pixel_angle_rad(self) -> float:
        return self.pixel_pitch_m / self.focal_length_m

    def with_d_over_r0(self, d_over_r0: float) -> "OpticalConfig":
        if not d_over_r0 > 0:
            raise ConfigError(f"d_over_r0 must be > 0 (got {d_over_r0})")
        return dataclasses.replace(self, fried_parameter_m=self.aperture_diameter_m / d_over_r0)

    def at_wavelength(self, wavelength_m: float) -> "OpticalConfig":
        """Same optics and turbulence at another wavelength (r0 ~ lambda^(6/5))."""
        r0 = self.fried_parameter_m * (wavelength_m / self.wavelength_m) ** 1.2
        return dataclasses.replace(self, wavelength_m=wavelength_m, fried_parameter_m=r0)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self, *extra) -> str:
        """Stable content hash of the configuration plus optional extra tokens."""
        parts = [f"{k}={v!r}" for k, v in sorted(self.to_dict().items())]
        parts += [repr(e) for e in extra]
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()
