"""Fully connected autoencoder codec trained with plain batch gradient descent.

Layer sizes are symmetric, e.g. ``[4096, 512, d, 512, 4096]``; the code is
the output of the middle layer.  Every layer uses a logistic sigmoid unless
an activation is overridden (the residual stage of the sequential hybrid
decodes through tanh).
"""
from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import CodecError, FormatError, TrainingDiverged

log = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "tanh")


def default_layer_sizes(d: int) -> list[int]:
    return [4096, 512, d, 512, 4096]


def _act(name, z):
    return expit(z) if name == "sigmoid" else np.tanh(z)


def _act_grad(name, a):
    # derivative expressed through the activation output
    return a * (1 - a) if name == "sigmoid" else 1 - a * a


@dataclass
class MlpAutoencoder:
    layer_sizes: list[int]
    weights: list[np.ndarray]           # weights[i] has shape (sizes[i], sizes[i+1])
    biases: list[np.ndarray]
    activations: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.layer_sizes)
        if n < 3 or n % 2 == 0:
            raise ValueError("layer_sizes must be symmetric with an odd number of layers")
        if list(self.layer_sizes) != list(self.layer_sizes)[::-1]:
            raise ValueError("encoder and decoder must be symmetric")
        if not self.activations:
            self.activations = ["sigmoid"] * (n - 1)
        if len(self.weights) != n - 1 or len(self.activations) != n - 1:
            raise ValueError("need one weight matrix and activation per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"parameter shapes of layer {i} do not match layer_sizes")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ValueError(f"activations must be in {ACTIVATIONS}")

    @property
    def code_length(self) -> int:
        return self.layer_sizes[len(self.layer_sizes) // 2]

    @property
    def n_encoder_layers(self) -> int:
        return len(self.layer_sizes) // 2

    @property
    def codec_id(self) -> str:
        return f"ae{self.code_length}"

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def astype(self, dtype) -> "MlpAutoencoder":
        return MlpAutoencoder(
            list(self.layer_sizes),
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            list(self.activations),
        )

    def _run(self, x, layers):
        a = x
        for i in layers:
            a = _act(self.activations[i], a @ self.weights[i] + self.biases[i])
        return a

    def encode(self, blocks) -> np.ndarray:
        x = np.asarray(blocks, dtype=self.weights[0].dtype)
        return self._run(x, range(self.n_encoder_layers))

    def decode(self, codes) -> np.ndarray:
        c = np.asarray(codes, dtype=self.weights[0].dtype)
        if c.shape[-1] != self.code_length:
            raise CodecError(f"{self.codec_id} expects codes of length {self.code_length}, got {c.shape[-1]}")
        return self._run(c, range(self.n_encoder_layers, len(self.weights)))

    def forward(self, blocks) -> tuple[np.ndarray, np.ndarray]:
        code = self.encode(blocks)
        recon = self.decode(code)
        if not (np.all(np.isfinite(code)) and np.all(np.isfinite(recon))):
            raise FloatingPointError("non-finite activation in forward pass")
        return code, recon

    def to_bytes(self) -> bytes:
        n = len(self.layer_sizes)
        parts = [
            b"AENC",
            struct.pack(f"<I{n}I", n, *self.layer_sizes),
            bytes(ACTIVATIONS.index(a) for a in self.activations),
        ]
        for w, b in zip(self.weights, self.biases):
            parts.append(w.astype("<f4").tobytes())
            parts.append(b.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "MlpAutoencoder":
        if buf[:4] != b"AENC":
            raise FormatError(f"bad autoencoder magic {buf[:4]!r}")
        try:
            (n,) = struct.unpack_from("<I", buf, 4)
            sizes = list(struct.unpack_from(f"<{n}I", buf, 8))
            off = 8 + 4 * n
            acts = [ACTIVATIONS[t] for t in buf[off:off + n - 1]]
            off += n - 1
            weights, biases = [], []
            for i in range(n - 1):
                cnt = sizes[i] * sizes[i + 1]
                weights.append(np.frombuffer(buf, "<f4", cnt, off).reshape(sizes[i], sizes[i + 1]).astype(np.float32))
                off += 4 * cnt
                biases.append(np.frombuffer(buf, "<f4", sizes[i + 1], off).astype(np.float32))
                off += 4 * sizes[i + 1]
        except (struct.error, ValueError, IndexError) as exc:
            raise FormatError(f"malformed autoencoder payload: {exc}") from exc
        if off != len(buf):
            raise FormatError("trailing bytes after autoencoder payload")
        return cls(sizes, weights, biases, acts)


def init(layer_sizes, seed: int = 0, output_activation: str | None = None, dtype=np.float64) -> MlpAutoencoder:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    acts = ["sigmoid"] * (len(layer_sizes) - 1)
    if output_activation is not None:
        acts[-1] = output_activation
    return MlpAutoencoder(list(layer_sizes), weights, biases, acts)


def loss_and_gradient(net: MlpAutoencoder, batch) -> tuple[float, list[np.ndarray]]:
    """Mean squared reconstruction error over all batch elements and its gradient.

    The gradient list follows :meth:`MlpAutoencoder.params` order
    (``w0, b0, w1, b1, ...``).
    """
    x = np.asarray(batch, dtype=net.weights[0].dtype)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    acts = [x]
    for w, b, name in zip(net.weights, net.biases, net.activations):
        acts.append(_act(name, acts[-1] @ w + b))
    err = acts[-1] - x
    mse = float(np.mean(err * err))
    delta = (2.0 / err.size) * err
    grads = [None] * (2 * len(net.weights))
    for i in reversed(range(len(net.weights))):
        delta = delta * _act_grad(net.activations[i], acts[i + 1])
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = delta @ net.weights[i].T
    return mse, grads


def reconstruction_mse(net: MlpAutoencoder, data, chunk: int = 2000) -> float:
    data = np.asarray(data)
    total = 0.0
    for s in range(0, len(data), chunk):
        x = data[s:s + chunk].astype(net.weights[0].dtype)
        r = net.decode(net.encode(x))
        total += float(np.sum((r - x) ** 2, dtype=np.float64))
    return total / data.size


@dataclass
class TrainConfig:
    """Defaults follow a 400 x 500 batch layout split 300/50/50.

    Each step descends the batch-mean of the per-sample summed squared error,
    i.e. the element-wise MSE gradient scaled by the output width, so the
    learning rate does not have to absorb the 4096-wide average.
    """

    batch_size: int = 500
    train_fraction: float = 0.75
    test_fraction: float = 0.125
    validation_fraction: float = 0.125
    learning_rate: float = 0.1
    momentum: float = 0.0
    max_epochs: int = 500
    patience: int = 20
    rel_tol: float = 1e-4
    rng_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        total = self.train_fraction + self.test_fraction + self.validation_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass
class TrainingCurve:
    train_mse: list[float] = field(default_factory=list)
    validation_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0
    initial_validation_mse: float = float("nan")
    test_mse: float = float("nan")


def split_data(data, cfg: TrainConfig):
    data = np.asarray(data)
    order = np.random.default_rng(cfg.rng_seed).permutation(len(data))
    n_train = int(round(cfg.train_fraction * len(data)))
    n_test = int(round(cfg.test_fraction * len(data)))
    train = data[order[:n_train]]
    test = data[order[n_train:n_train + n_test]]
    val = data[order[n_train + n_test:]]
    return train, test, val


def train(net: MlpAutoencoder, data, cfg: TrainConfig | None = None,
          targets=None) -> tuple[MlpAutoencoder, TrainingCurve]:
    """Batch gradient descent with validation-based early stopping.

    One parameter update per batch.  Training stops once the validation MSE
    has not improved by ``rel_tol`` (relative) for ``patience`` epochs, and
    the parameters with the lowest validation MSE are returned.
    """
    cfg = cfg or TrainConfig()
    net = net.astype(np.dtype(cfg.dtype))
    train_set, test_set, val_set = split_data(data, cfg)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("data too small for the configured split")
    scale = net.layer_sizes[-1]
    rng = np.random.default_rng([cfg.rng_seed, 1])
    velocity = [np.zeros_like(p) for p in net.params()]

    curve = TrainingCurve()
    best = copy.deepcopy(net)
    best_val = reconstruction_mse(net, val_set)
    curve.initial_validation_mse = best_val
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for s in range(0, len(order), cfg.batch_size):
            batch = train_set[order[s:s + cfg.batch_size]]
            mse, grads = loss_and_gradient(net, batch)
            if not np.isfinite(mse) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch} (mse={mse})")
            epoch_loss += mse * len(batch)
            for p, g, v in zip(net.params(), grads, velocity):
                v *= cfg.momentum
                v -= cfg.learning_rate * scale * g
                p += v
        val = reconstruction_mse(net, val_set)
        if not np.isfinite(val):
            raise TrainingDiverged(f"validation MSE became non-finite at epoch {epoch}")
        curve.train_mse.append(epoch_loss / len(train_set))
        curve.validation_mse.append(val)
        if val < best_val * (1 - cfg.rel_tol):
            best_val, best, stale = val, copy.deepcopy(net), 0
            curve.best_epoch = epoch + 1
        else:
            stale += 1
            if val < best_val:
                best_val, best = val, copy.deepcopy(net)
                curve.best_epoch = epoch + 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d, val %.3g)", epoch + 1, curve.best_epoch, best_val)
                break
        log.debug("epoch %d train %.4g val %.4g", epoch + 1, curve.train_mse[-1], val)
    if len(test_set):
        curve.test_mse = reconstruction_mse(best, test_set)
    return best, curve


def save(net: MlpAutoencoder, path) -> None:
    Path(path).write_bytes(net.to_bytes())


def load(path) -> MlpAutoencoder:
    return MlpAutoencoder.from_bytes(Path(path).read_bytes())
