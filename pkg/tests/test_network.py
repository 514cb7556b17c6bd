import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p2sturb.basis import project_psf
from p2sturb.errors import ConfigError, DimensionError, FormatError, TrainingDivergedError
from p2sturb.network import (MlpWeights, TrainConfig, init_weights, load_weights, loss_and_grad,
                             p2s_forward, p2s_forward_batch, save_weights, train_p2s)


def _fd_check(w, x, y, eps=1e-6):
    _, gw, gb = loss_and_grad(w, x, y)
    rng = np.random.default_rng(0)
    worst = 0.0
    for params, grads in ((w.w, gw), (w.b, gb)):
        for p, g in zip(params, grads):
            for _ in range(6):
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


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    w = init_weights(7, (9, 8), 5, np.linspace(0.5, 2, 7), seed=2)
    for b in w.b:
        b[:] = rng.normal(size=b.shape) * 0.1
    x = rng.normal(size=(11, 7))
    y = rng.normal(size=(11, 5))
    assert _fd_check(w, x, y) < 1e-4


def test_init_is_deterministic():
    a, b = init_weights(5, (4, 4), 3, seed=9), init_weights(5, (4, 4), 3, seed=9)
    assert all(np.array_equal(p, q) for p, q in zip(a.w, b.w))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
def test_rows_independent_of_batch(n, seed):
    rng = np.random.default_rng(seed)
    w = init_weights(33, (32, 32), 10, seed=1)
    x = rng.normal(size=(n, 33))
    full = p2s_forward_batch(x, w)
    single = np.stack([p2s_forward(r, w) for r in x])
    assert np.array_equal(full, single)
    perm = rng.permutation(n)
    assert np.array_equal(p2s_forward_batch(x[perm], w), full[perm])
    assert np.array_equal(p2s_forward_batch(x, w, transpose=True), full.T)


def test_forward_matches_float64_reference():
    rng = np.random.default_rng(4)
    w = init_weights(33, (32, 32), 10, np.linspace(0.2, 1.0, 33), seed=1)
    x = rng.normal(size=(20, 33))
    z = x / w.input_scale
    ref = np.tanh(np.tanh(z @ w.w[0] + w.b[0]) @ w.w[1] + w.b[1]) @ w.w[2] + w.b[2]
    assert np.allclose(p2s_forward_batch(x, w), ref, atol=1e-5)


def test_shape_errors():
    w = init_weights(5, (4, 4), 3)
    with pytest.raises(DimensionError):
        p2s_forward_batch(np.zeros((2, 6)), w)
    with pytest.raises(DimensionError):
        p2s_forward(np.zeros((1, 5)), w)
    with pytest.raises(DimensionError):
        MlpWeights(np.ones(5), [np.zeros((5, 4)), np.zeros((3, 4)), np.zeros((4, 3))],
                   [np.zeros(4), np.zeros(4), np.zeros(3)])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgd", schedule="linear")
    cos = TrainConfig(epochs=10, learning_rate=1.0)
    assert cos.rate(0) == 1.0 and cos.rate(5) == pytest.approx(0.5)


def test_training_beats_mean_predictor(small_assets):
    _, _, w, rep = small_assets
    assert rep.val_loss[-1] < 0.5 * rep.mean_predictor_val_loss
    assert rep.train_loss[-1] < rep.train_loss[0]
    assert w.all_finite()


def test_training_deterministic(small_assets):
    ds, basis, _, _ = small_assets
    sub = ds.subset(np.arange(200))
    cfg = TrainConfig(epochs=3, hidden=(8, 8), batch_size=32, seed=4)
    a, _ = train_p2s(sub, basis, cfg)
    b, _ = train_p2s(sub, basis, cfg)
    assert a.digest == b.digest
    c, _ = train_p2s(sub, basis, TrainConfig(epochs=3, hidden=(8, 8), batch_size=32, seed=5))
    assert c.digest != a.digest


def test_momentum_optimizer_runs(small_assets):
    ds, basis, _, _ = small_assets
    sub = ds.subset(np.arange(200))
    w, rep = train_p2s(sub, basis, TrainConfig(epochs=4, hidden=(8, 8), optimizer="momentum",
                                               schedule="step", learning_rate=0.01, seed=1))
    assert np.isfinite(rep.val_loss[-1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported(small_assets):
    ds, basis, _, _ = small_assets
    sub = ds.subset(np.arange(100))
    bad = np.full((100, basis.m), np.inf)
    with pytest.raises(TrainingDivergedError) as info:
        train_p2s(sub, basis, TrainConfig(epochs=2, hidden=(4, 4)), targets=bad)
    assert info.value.last_stable_epoch == 0


def test_predictions_are_psfs(small_assets):
    ds, basis, w, _ = small_assets
    beta = p2s_forward_batch(ds.alpha_high[:50], w)
    target = project_psf(ds.psfs[:50].astype(float), basis)
    err = np.linalg.norm(beta - target, axis=1) / np.linalg.norm(ds.psfs[:50].reshape(50, -1), axis=1)
    assert np.median(err) < 0.5


def test_weights_round_trip(small_assets, tmp_path):
    _, basis, w, _ = small_assets
    p = tmp_path / "w.p2sw"
    save_weights(w, p)
    back = load_weights(p)
    assert back.digest == w.digest and back.basis_digest == basis.digest
    x = np.random.default_rng(0).normal(size=(9, w.k_in))
    assert np.array_equal(p2s_forward_batch(x, back), p2s_forward_batch(x, w))
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(FormatError):
        load_weights(p)
