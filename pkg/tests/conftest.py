import os
from pathlib import Path

import pytest

from p2sturb import _kernels
from p2sturb.basis import fit_pca, generate_dataset, load_basis, load_dataset, save_basis, save_dataset
from p2sturb.config import OpticalConfig
from p2sturb.network import TrainConfig, load_weights, save_weights, train_p2s

HERE = Path(__file__).parent

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def asset_dir() -> Path:
    root = os.environ.get("P2S_TEST_ASSETS") or Path.home() / ".cache" / "p2sturb" / "test-assets"
    p = Path(root)
    p.mkdir(parents=True, exist_ok=True)
    return p


@pytest.fixture(scope="session")
def config():
    return OpticalConfig()


@pytest.fixture(scope="session")
def small_assets(config):
    """Quick corpus, basis and network for unit tests (not accuracy targets)."""
    ds = generate_dataset(config, 1500, (1.0, 4.0), seed=11)
    basis = fit_pca(ds, 20)
    w, rep = train_p2s(ds, basis, TrainConfig(epochs=100, hidden=(32, 32), batch_size=64,
                                              learning_rate=5e-3, seed=3))
    return ds, basis, w, rep


def build_full_assets(config):
    """Production-size corpus (50k PSFs), M=100 basis and default network.

    Built once and cached on disk; override the location with P2S_TEST_ASSETS.
    """
    d = asset_dir()
    tag = config.digest("assets-v1")[:12]
    ds_p, b_p, w_p = d / f"ds_{tag}.p2sd", d / f"basis_{tag}.p2sb", d / f"w_{tag}.p2sw"
    if ds_p.exists():
        ds = load_dataset(ds_p)
    else:
        ds = generate_dataset(config, 50000, (1.0, 8.0), seed=0)
        save_dataset(ds, ds_p)
    if b_p.exists():
        basis = load_basis(b_p)
    else:
        basis = fit_pca(ds, 100)
        save_basis(basis, b_p)
    if w_p.exists():
        w = load_weights(w_p)
    else:
        w, _ = train_p2s(ds, basis, TrainConfig())
        save_weights(w, w_p)
    return ds, basis, w


@pytest.fixture(scope="session")
def full_assets(config):
    return build_full_assets(config)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    prev = _kernels.use_backend(request.param)
    yield request.param
    _kernels.use_backend(prev)
