"""Phase-to-Space network: high-order Zernike coefficients to PSF basis weights.

A three-layer perceptron ``K_in -> h1 -> h2 -> M`` with tanh hidden units and
a linear output, trained from scratch by minibatch Adam (or momentum) on the
squared error of the basis coefficients. Because the basis is orthonormal,
that error equals the squared PSF reconstruction error.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import PsfBasis, PsfDataset, project_psf
from .errors import (ConfigError, DimensionError, FormatError, TrainingDivergedError,
                     UnsupportedVersionError)
from .optics import noll_covariance

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"P2SW"
WEIGHTS_VERSION = 1
ACTIVATIONS = {1: "tanh"}
_ACT_ID = {v: k for k, v in ACTIVATIONS.items()}


@dataclass(eq=False)
class MlpWeights:
    """Network parameters; ``w[l]`` has shape ``(fan_in, fan_out)``.

    ``input_scale`` divides the raw coefficients before the first layer.
    """

    input_scale: np.ndarray = field(repr=False)
    w: list = field(repr=False)
    b: list = field(repr=False)
    activation: str = "tanh"
    basis_digest: str = ""

    def __post_init__(self):
        if self.activation not in _ACT_ID:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.w) != 3 or len(self.b) != 3:
            raise DimensionError("expected three layers")
        dims = self.dims
        for layer, (wl, bl) in enumerate(zip(self.w, self.b)):
            if wl.shape != (dims[layer], dims[layer + 1]) or bl.shape != (dims[layer + 1],):
                raise DimensionError(f"layer {layer} shapes {wl.shape}, {bl.shape} break the chain {dims}")
        if self.input_scale.shape != (dims[0],):
            raise DimensionError("input_scale length must equal the input size")
        self._f32 = None

    @property
    def dims(self) -> tuple:
        return (self.w[0].shape[0], self.w[0].shape[1], self.w[1].shape[1], self.w[2].shape[1])

    @property
    def k_in(self) -> int:
        return self.dims[0]

    @property
    def m(self) -> int:
        return self.dims[3]

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.input_scale, "<f4").tobytes())
        for a in (*self.w, *self.b):
            h.update(np.ascontiguousarray(a, "<f4").tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.input_scale, *self.w, *self.b))

    def float32(self):
        """Inference copies: first-layer weights pre-divided by the input scale."""
        if self._f32 is None:
            w0 = (self.w[0] / self.input_scale[:, None]).astype(np.float32)
            self._f32 = ([w0] + [wl.astype(np.float32) for wl in self.w[1:]],
                         [bl.astype(np.float32) for bl in self.b])
        return self._f32

    def copy(self) -> "MlpWeights":
        return MlpWeights(self.input_scale.copy(), [a.copy() for a in self.w],
                          [a.copy() for a in self.b], self.activation, self.basis_digest)


def init_weights(k_in: int, hidden=(256, 256), m: int = 100, input_scale=None,
                 seed: int = 0) -> MlpWeights:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    dims = (k_in, *hidden, m)
    w, b = [], []
    for fi, fo in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / (fi + fo))
        w.append(rng.uniform(-lim, lim, size=(fi, fo)))
        b.append(np.zeros(fo))
    scale = np.ones(k_in) if input_scale is None else np.asarray(input_scale, dtype=float)
    return MlpWeights(scale, w, b)


_CHUNK = 4096


def _forward_rows(x, ws, bs):
    if x.shape[0] == 1:
        # a lone row would take the matrix-vector path and round differently
        return _forward_rows(np.concatenate([x, np.zeros_like(x)]), ws, bs)[:1]
    h = x @ ws[0]
    h += bs[0]
    return forward_from_preactivation(h, ws, bs)


def forward_from_preactivation(h, ws, bs):
    """Finish the forward pass from first-layer pre-activations (overwritten)."""
    np.tanh(h, out=h)
    h2 = h @ ws[1]
    h2 += bs[1]
    np.tanh(h2, out=h2)
    out = h2 @ ws[2]
    out += bs[2]
    return out


def p2s_forward_batch(alphas, w: MlpWeights, transpose: bool = False) -> np.ndarray:
    """Evaluate the network on rows of ``alphas`` (float32 arithmetic).

    Rows never interact and are processed in cache-sized chunks; every chunk
    takes the matrix-matrix path, so row ``i`` of any batch equals the
    single-row call bitwise. ``transpose=True`` returns ``(M, N)``.
    """
    x = np.asarray(alphas, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != w.k_in:
        raise DimensionError(f"expected (N, {w.k_in}) inputs, got {x.shape}")
    n = x.shape[0]
    ws, bs = w.float32()
    out = np.empty((w.m, n) if transpose else (n, w.m), dtype=np.float32)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        if stop == n - 1:
            stop = n  # never leave a single trailing row
        y = _forward_rows(x[start:stop], ws, bs)
        if transpose:
            out[:, start:stop] = y.T
        else:
            out[start:stop] = y
        if stop == n:
            break
    return out


def p2s_forward(alpha, w: MlpWeights) -> np.ndarray:
    alpha = np.asarray(alpha)
    if alpha.ndim != 1:
        raise DimensionError("p2s_forward takes a single coefficient vector")
    return p2s_forward_batch(alpha[None], w)[0]


# ---------------------------------------------------------------------------
# training

def _forward_train(x, w: MlpWeights):
    z = x / w.input_scale
    a1 = np.tanh(z @ w.w[0] + w.b[0])
    a2 = np.tanh(a1 @ w.w[1] + w.b[1])
    out = a2 @ w.w[2] + w.b[2]
    return z, a1, a2, out


def loss_and_grad(w: MlpWeights, x, y):
    """Mean over rows of the summed squared output error, with exact gradients.

    Returns ``(loss, grads_w, grads_b)`` in the layout of ``w.w`` and ``w.b``.
    """
    z, a1, a2, out = _forward_train(x, w)
    n = x.shape[0]
    r = out - y
    loss = float(np.sum(r * r) / n)
    d3 = (2.0 / n) * r
    g3 = a2.T @ d3
    d2 = (d3 @ w.w[2].T) * (1.0 - a2 * a2)
    g2 = a1.T @ d2
    d1 = (d2 @ w.w[1].T) * (1.0 - a1 * a1)
    g1 = z.T @ d1
    return loss, [g1, g2, g3], [d1.sum(0), d2.sum(0), d3.sum(0)]


def _adam(param, grad, m1, m2, lr, step, b1=0.9, b2=0.999, eps=1e-8):
    m1 *= b1
    m1 += (1 - b1) * grad
    m2 *= b2
    m2 += (1 - b2) * grad * grad
    corr = math.sqrt(1 - b2 ** step) / (1 - b1 ** step)
    param -= (lr * corr) * m1 / (np.sqrt(m2) + eps)


def predict_train(w: MlpWeights, x):
    return _forward_train(x, w)[3]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 2e-3
    momentum: float = 0.9
    optimizer: str = "adam"
    schedule: str = "cosine"
    decay_every: int = 20
    decay_factor: float = 0.3
    validation_fraction: float = 0.1
    hidden: tuple = (256, 256)
    seed: int = 0
    dtype: str = "float32"
    max_grad_norm: float = 10.0

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 < self.validation_fraction < 1:
            problems.append("validation_fraction must lie in (0, 1)")
        if self.optimizer not in ("momentum", "adam"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("step", "constant", "cosine"):
            problems.append(f"unknown schedule {self.schedule!r}")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if problems:
            raise ConfigError("invalid training configuration: " + "; ".join(problems))

    def rate(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        if self.schedule == "cosine":
            return 0.5 * self.learning_rate * (1 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    mean_predictor_val_loss: float
    zero_predictor_val_loss: float
    validation_indices: np.ndarray = field(repr=False)
    target_scale: float = 1.0


def split_indices(n: int, fraction: float, seed: int):
    rng = np.random.Generator(np.random.Philox(key=int(seed) + (1 << 64)))
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        n_val = n - 1 if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def input_scale_for(k: int, d_over_r0_median: float) -> np.ndarray:
    """R_Z standard deviations of modes 4..K at the given D/r0."""
    rz = noll_covariance(k, d_over_r0_median).matrix
    return np.sqrt(np.diag(rz)[3:])


def train_p2s(ds: PsfDataset, basis: PsfBasis, cfg: TrainConfig = TrainConfig(),
              targets=None, progress=None):
    """Fit the network to ``project_psf`` targets of the corpus.

    Deterministic under ``cfg.seed``: the split, initialisation and batch
    order all come from counter-based streams keyed by the seed.
    """
    if ds.size != basis.size:
        raise DimensionError(f"dataset PSF size {ds.size} differs from basis size {basis.size}")
    dt = np.dtype(cfg.dtype)
    x_all = ds.alpha_high.astype(np.float64)
    y_all = project_psf(ds.psfs.astype(np.float64), basis) if targets is None else np.asarray(targets, float)
    tr, va = split_indices(ds.count, cfg.validation_fraction, cfg.seed)
    scale_in = input_scale_for(ds.k, float(np.median(ds.d_over_r0)))
    t_scale = float(np.sqrt(np.mean(y_all[tr] ** 2))) or 1.0
    y_s = y_all / t_scale
    w = init_weights(ds.k - 3, cfg.hidden, basis.m, scale_in, cfg.seed)
    w = MlpWeights(w.input_scale.astype(dt), [a.astype(dt) for a in w.w],
                   [a.astype(dt) for a in w.b], w.activation)
    xt, yt = x_all[tr].astype(dt), y_s[tr].astype(dt)
    xv, yv = x_all[va].astype(dt), y_s[va].astype(dt)
    vel_w = [np.zeros_like(a) for a in w.w]
    vel_b = [np.zeros_like(a) for a in w.b]
    sq_w = [np.zeros_like(a) for a in w.w]
    sq_b = [np.zeros_like(a) for a in w.b]
    step = 0
    mean_beta = yt.mean(0)
    report = TrainReport([], [], float(np.mean(np.sum((yv - mean_beta) ** 2, 1))) * t_scale ** 2,
                         float(np.mean(np.sum(yv ** 2, 1))) * t_scale ** 2, va, t_scale)
    order_rng = np.random.Generator(np.random.Philox(key=int(cfg.seed) + (2 << 64)))
    last_good_epoch = 0
    for epoch in range(cfg.epochs):
        lr = cfg.rate(epoch)
        perm = order_rng.permutation(len(tr))
        total = 0.0
        for start in range(0, len(tr), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, gw, gb = loss_and_grad(w, xt[idx], yt[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch + 1}",
                                            last_stable_epoch=last_good_epoch)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in (*gw, *gb)))
            clip = min(1.0, cfg.max_grad_norm / norm) if norm > 0 else 1.0
            step += 1
            for layer in range(3):
                if cfg.optimizer == "adam":
                    _adam(w.w[layer], gw[layer], vel_w[layer], sq_w[layer], lr, step)
                    _adam(w.b[layer], gb[layer], vel_b[layer], sq_b[layer], lr, step)
                else:
                    vel_w[layer] *= cfg.momentum
                    vel_w[layer] -= (lr * clip) * gw[layer]
                    vel_b[layer] *= cfg.momentum
                    vel_b[layer] -= (lr * clip) * gb[layer]
                    w.w[layer] += vel_w[layer]
                    w.b[layer] += vel_b[layer]
            total += loss * len(idx)
        val = float(np.mean(np.sum((predict_train(w, xv) - yv) ** 2, 1))) if len(va) else float("nan")
        train = total / len(tr)
        if not (math.isfinite(train) and w.all_finite()):
            raise TrainingDivergedError(f"weights became non-finite in epoch {epoch + 1}",
                                        last_stable_epoch=last_good_epoch)
        last_good_epoch = epoch + 1
        report.train_loss.append(train * t_scale ** 2)
        report.val_loss.append(val * t_scale ** 2)
        log.info("epoch %d lr %.3g train %.4g val %.4g", epoch + 1, lr, train, val)
        if progress is not None:
            progress(epoch + 1, train * t_scale ** 2, val * t_scale ** 2)
    # fold the target scale into the output layer, keep float64 master copy
    ws = [a.astype(np.float64) for a in w.w]
    bs = [a.astype(np.float64) for a in w.b]
    ws[2] = ws[2] * t_scale
    bs[2] = bs[2] * t_scale
    # round to the stored precision so saving is lossless
    r32 = lambda a: a.astype(np.float32).astype(np.float64)
    final = MlpWeights(r32(w.input_scale), [r32(a) for a in ws], [r32(a) for a in bs],
                       "tanh", basis.digest)
    return final, report


# ---------------------------------------------------------------------------
# serialisation

def save_weights(w: MlpWeights, path) -> None:
    """Header, standardisation vector, then ``W1 b1 W2 b2 W3 b3`` as float32 LE."""
    digest = bytes.fromhex(w.basis_digest) if w.basis_digest else bytes(32)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<HB", WEIGHTS_VERSION, _ACT_ID[w.activation]))
        fh.write(struct.pack("<4I", *w.dims))
        fh.write(digest)
        fh.write(np.ascontiguousarray(w.input_scale, "<f4").tobytes())
        for wl, bl in zip(w.w, w.b):
            fh.write(np.ascontiguousarray(wl, "<f4").tobytes())
            fh.write(np.ascontiguousarray(bl, "<f4").tobytes())


def load_weights(path) -> MlpWeights:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a P2S weight file (bad magic)")
    try:
        version, act = struct.unpack_from("<HB", data, 4)
        if version != WEIGHTS_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported weight file version {version}")
        dims = struct.unpack_from("<4I", data, 7)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if act not in ACTIVATIONS:
        raise FormatError(f"{path}: unknown activation id {act}")
    if min(dims) < 1:
        raise FormatError(f"{path}: invalid dimensions {dims}")
    off = 23
    digest = data[off:off + 32]
    off += 32
    sizes = [dims[0]]
    for fi, fo in zip(dims[:-1], dims[1:]):
        sizes += [fi * fo, fo]
    need = off + 4 * sum(sizes)
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}")
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(data, "<f4", n, off).astype(np.float64))
        off += 4 * n
    ws, bs = [], []
    for layer, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        ws.append(arrays[1 + 2 * layer].reshape(fi, fo))
        bs.append(arrays[2 + 2 * layer])
    return MlpWeights(arrays[0], ws, bs, ACTIVATIONS[act],
                      "" if digest == bytes(32) else digest.hex())
