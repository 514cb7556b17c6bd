"""Fast simulation of anisoplanatic atmospheric turbulence with a phase-to-space transform."""

from .config import OpticalConfig
from .errors import (AssetError, ConfigError, DimensionError, FormatError, NumericalError,
                     P2SError, SizeGuardError)
from .optics import (ApertureGrid, Psf, ZernikeBasisSet, noll_covariance, noll_index,
                     psf_from_phase, zernike_eval)
from .correlation import (AnchorGrid, SpatialCovariance, angular_correlation,
                          build_spatial_covariance, load_covariance, sample_anchor_field,
                          save_covariance)
from .basis import (PsfBasis, PsfDataset, fit_pca, generate_dataset, load_basis, load_dataset,
                    project_psf, reconstruct_psf, save_basis, save_dataset)
from .network import (MlpWeights, TrainConfig, load_weights, p2s_forward, p2s_forward_batch,
                      save_weights, train_p2s)
from .engine import SimAssets, SimFrame, interpolate_alpha, render, simulate_frame

__version__ = "0.1.0"
