"""PCA + autoencoder combinations.

Parallel: both codecs encode the block; decoding mixes the two
reconstructions as ``w * pca + (1 - w) * ae``.

Sequential: PCA encodes the block, an autoencoder with a tanh output encodes
the PCA residual; decoding adds ``w2`` times the decoded residual to the PCA
reconstruction.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import pca as pca_mod
from .errors import CodecError, FormatError
from .pca import PcaCodec

log = logging.getLogger(__name__)

TOTAL_CODE_LENGTH = 128
INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0

_HEADER = struct.Struct("<4sBIIf")
_MODES = ("parallel", "sequential")


def golden_section(f, lo: float = 0.0, hi: float = 1.0, tol: float = 1e-3,
                   batch: int | None = None, prefer: str = "hi"):
    """Minimise a unimodal ``f`` on ``[lo, hi]`` by golden-section search.

    With ``batch=B`` the search runs ``B`` independent problems at once and
    ``f`` maps a ``(B,)`` array of abscissae to ``(B,)`` values.  The interior
    result is compared with both endpoints; ties within 1e-12 relative go to
    the ``prefer`` endpoint.  Returns ``(x, f(x))``.
    """
    shape = () if batch is None else (batch,)
    fv = (lambda x: np.asarray(f(x), dtype=np.float64)) if batch is not None else \
        (lambda x: np.asarray(f(float(x)), dtype=np.float64))
    a = np.full(shape, float(lo))
    b = np.full(shape, float(hi))
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = fv(c), fv(d)
    while np.max(b - a) > tol:
        left = fc < fd  # minimum lies in [a, d]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - INV_PHI * (b - a)
        new_d = a + INV_PHI * (b - a)
        c, d = np.where(left, new_c, d), np.where(left, c, new_d)
        # both candidates are evaluated so batched problems can branch independently
        fc, fd = np.where(left, fv(new_c), fd), np.where(left, fc, fv(new_d))
    x = 0.5 * (a + b)
    fx = fv(x)
    f_lo, f_hi = fv(np.full(shape, float(lo))), fv(np.full(shape, float(hi)))
    first, second = (f_hi, f_lo) if prefer == "hi" else (f_lo, f_hi)
    first_x, second_x = (hi, lo) if prefer == "hi" else (lo, hi)
    best_x, best_f = x, fx
    for ex, ef in ((second_x, second), (first_x, first)):
        take = ef <= best_f * (1 + 1e-12) + 1e-300
        best_x = np.where(take, ex, best_x)
        best_f = np.where(take, ef, best_f)
    if batch is None:
        return float(best_x), float(best_f)
    return best_x, best_f


def _mix_mse(w, p, a, x, axis=None):
    w = np.asarray(w)
    if w.ndim:
        w = w[:, None]
    return np.mean((w * p + (1 - w) * a - x) ** 2, axis=axis)


def closed_form_weight(p, a, x, axis=None):
    """Exact minimiser over ``[0, 1]`` of ``mean((w p + (1 - w) a - x)^2)``."""
    diff = p - a
    num = np.sum(diff * (x - a), axis=axis)
    den = np.sum(diff * diff, axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(den > 0, num / np.where(den > 0, den, 1), 1.0)
    w = np.clip(w, 0.0, 1.0)
    return float(w) if np.ndim(w) == 0 else w


def _check_split(d1, d2):
    if d1 + d2 != TOTAL_CODE_LENGTH:
        raise ValueError(f"code split {d1}+{d2} must total {TOTAL_CODE_LENGTH}")


@dataclass
class ParallelCodec:
    pca: PcaCodec
    ann: ae.MlpAutoencoder
    w: float = 1.0

    def __post_init__(self):
        _check_split(self.pca.code_length, self.ann.code_length)
        _check_weight(self.w)

    @property
    def code_length(self):
        return self.pca.code_length + self.ann.code_length

    @property
    def codec_id(self):
        return f"parallel{self.pca.code_length}+{self.ann.code_length}"

    def split(self, codes):
        c = np.asarray(codes, dtype=np.float64)
        if c.shape[-1] != self.code_length:
            raise CodecError(f"{self.codec_id} expects codes of length {self.code_length}")
        return c[..., : self.pca.code_length], c[..., self.pca.code_length:]

    def encode(self, blocks) -> np.ndarray:
        return np.concatenate([self.pca.encode(blocks), self.ann.encode(blocks).astype(np.float64)], axis=-1)

    def decode_parts(self, codes):
        c1, c2 = self.split(codes)
        return self.pca.decode(c1), self.ann.decode(c2).astype(np.float64)

    def decode(self, codes, w=None) -> np.ndarray:
        w = self.w if w is None else w
        _check_weight(w)
        p, a = self.decode_parts(codes)
        w = np.asarray(w, dtype=np.float64)
        if w.ndim:
            w = w[:, None]
        return np.clip(w * p + (1 - w) * a, 0.0, 1.0)

    def to_bytes(self) -> bytes:
        return _pack(0, self.pca, self.ann, self.w)


def _check_weight(w):
    w = np.asarray(w)
    if np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
        raise ValueError("mixing weight must lie in [0, 1]")


def optimize_weight(codec: ParallelCodec, blocks, per_block: bool = False, tol: float = 1e-3):
    """Line-search the parallel mixing weight minimising reconstruction MSE.

    Per-map (default): one ``w`` for the whole block set.  Per-block: one
    ``w`` per row.  Ties go to ``w = 1`` (PCA only).  Returns ``(w, mse)``.
    """
    x = np.atleast_2d(np.asarray(blocks, dtype=np.float64))
    p, a = codec.decode_parts(codec.encode(x))
    if per_block:
        return golden_section(lambda w: _mix_mse(w, p, a, x, axis=1), 0.0, 1.0, tol, batch=len(x), prefer="hi")
    return golden_section(lambda w: _mix_mse(w, p, a, x), 0.0, 1.0, tol, prefer="hi")


def fit_parallel(data, pca_dims: int = 64, ann_dims: int = 64, train_cfg: ae.TrainConfig | None = None,
                 seed: int = 0, pca_codec: PcaCodec | None = None) -> ParallelCodec:
    _check_split(pca_dims, ann_dims)
    data = np.asarray(data)
    first = pca_codec or pca_mod.fit(data, pca_dims - 1)
    net, _ = ae.train(ae.init(ae.default_layer_sizes(ann_dims), seed), data, train_cfg)
    codec = ParallelCodec(first, net, 1.0)
    codec.w, mse = optimize_weight(codec, data)
    log.info("parallel mixing weight %.4f (mse %.4g)", codec.w, mse)
    return codec


@dataclass
class SequentialCodec:
    """``residual_stage`` is any object with ``encode``/``decode``/``code_length``;
    normally an autoencoder whose output layer is tanh."""

    pca: PcaCodec
    residual_stage: object
    w2: float = 1.0
    residual_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_split(self.pca.code_length, self.residual_stage.code_length)

    @property
    def code_length(self):
        return self.pca.code_length + self.residual_stage.code_length

    @property
    def codec_id(self):
        return f"sequential{self.pca.code_length}+{self.residual_stage.code_length}"

    def encode(self, blocks) -> np.ndarray:
        x = np.asarray(blocks, dtype=np.float64)
        c1 = self.pca.encode(x)
        residual = x - self.pca.decode(c1)
        c2 = np.asarray(self.residual_stage.encode(residual), dtype=np.float64)
        return np.concatenate([c1, c2], axis=-1)

    def decode_parts(self, codes):
        c = np.asarray(codes, dtype=np.float64)
        if c.shape[-1] != self.code_length:
            raise CodecError(f"{self.codec_id} expects codes of length {self.code_length}")
        k = self.pca.code_length
        return self.pca.decode(c[..., :k]), np.asarray(self.residual_stage.decode(c[..., k:]), dtype=np.float64)

    def decode(self, codes, w2=None) -> np.ndarray:
        w2 = self.w2 if w2 is None else w2
        base, res = self.decode_parts(codes)
        w2 = np.asarray(w2, dtype=np.float64)
        if w2.ndim:
            w2 = w2[:, None]
        return np.clip(base + w2 * res, 0.0, 1.0)

    def to_bytes(self) -> bytes:
        if not isinstance(self.residual_stage, ae.MlpAutoencoder):
            raise TypeError("only autoencoder residual stages can be serialised")
        return _pack(1, self.pca, self.residual_stage, self.w2)


def optimize_second_weight(codec: SequentialCodec, blocks, per_block: bool = False, tol: float = 1e-3):
    """Line-search ``w2`` on ``[0, 1]``; ties go to ``w2 = 0`` (PCA only)."""
    x = np.atleast_2d(np.asarray(blocks, dtype=np.float64))
    base, res = codec.decode_parts(codec.encode(x))

    def cost(w2, axis=None):
        w2 = np.asarray(w2)
        if w2.ndim:
            w2 = w2[:, None]
        return np.mean((np.clip(base + w2 * res, 0.0, 1.0) - x) ** 2, axis=axis)

    if per_block:
        return golden_section(lambda w: cost(w, axis=1), 0.0, 1.0, tol, batch=len(x), prefer="lo")
    return golden_section(cost, 0.0, 1.0, tol, prefer="lo")


def residual_summary(residuals) -> dict:
    """Mean, energy and low-frequency share of a residual set."""
    r = np.asarray(residuals, dtype=np.float64)
    cubes = r.reshape(-1, 16, 16, 16)
    spectrum = np.abs(np.fft.fftn(cubes, axes=(1, 2, 3))) ** 2
    f = np.fft.fftfreq(16) * 16
    fx, fy, fz = np.meshgrid(f, f, f, indexing="ij")
    low = np.sqrt(fx ** 2 + fy ** 2 + fz ** 2) <= 2
    total = spectrum.sum()
    return {
        "mean": float(r.mean()),
        "max_abs_voxel_mean": float(np.abs(r.mean(axis=0)).max()),
        "rms": float(np.sqrt(np.mean(r ** 2))),
        "min": float(r.min()),
        "max": float(r.max()),
        "low_frequency_energy_fraction": float(spectrum[:, low].sum() / total) if total > 0 else 0.0,
    }


def sequential_fit(data, pca_dims: int = 64, ann_dims: int = 64, train_cfg: ae.TrainConfig | None = None,
                   seed: int = 0, pca_codec: PcaCodec | None = None) -> SequentialCodec:
    """Fit PCA, then train a tanh-output autoencoder on its residuals."""
    _check_split(pca_dims, ann_dims)
    data = np.asarray(data, dtype=np.float64)
    first = pca_codec or pca_mod.fit(data, pca_dims - 1)
    residuals = data - first.decode(first.encode(data))
    stats = residual_summary(residuals)
    log.info("residual set: %s", stats)
    net = ae.init(ae.default_layer_sizes(ann_dims), seed, output_activation="tanh")
    net, _ = ae.train(net, residuals, train_cfg)
    codec = SequentialCodec(first, net, 1.0, stats)
    codec.w2, mse = optimize_second_weight(codec, data)
    log.info("sequential second-stage weight %.4f (mse %.4g)", codec.w2, mse)
    return codec


def _pack(mode, pca_codec, net, w) -> bytes:
    p = pca_codec.to_bytes()
    a = net.to_bytes()
    return b"".join([
        _HEADER.pack(b"HYBC", mode, pca_codec.code_length, net.code_length, w),
        struct.pack("<Q", len(p)), p,
        struct.pack("<Q", len(a)), a,
    ])


def from_bytes(buf: bytes):
    if len(buf) < _HEADER.size + 8:
        raise FormatError("truncated hybrid codec header")
    magic, mode, d1, d2, w = _HEADER.unpack_from(buf)
    if magic != b"HYBC":
        raise FormatError(f"bad hybrid codec magic {magic!r}")
    if mode >= len(_MODES):
        raise FormatError(f"unknown hybrid mode {mode}")
    off = _HEADER.size
    (n1,) = struct.unpack_from("<Q", buf, off)
    first = PcaCodec.from_bytes(buf[off + 8: off + 8 + n1])
    off += 8 + n1
    (n2,) = struct.unpack_from("<Q", buf, off)
    net = ae.MlpAutoencoder.from_bytes(buf[off + 8: off + 8 + n2])
    if off + 8 + n2 != len(buf):
        raise FormatError("trailing bytes after hybrid codec payload")
    if (first.code_length, net.code_length) != (d1, d2):
        raise FormatError("hybrid header split does not match embedded codecs")
    if mode == 0:
        return ParallelCodec(first, net, float(w))
    return SequentialCodec(first, net, float(w))


def save(codec, path) -> None:
    Path(path).write_bytes(codec.to_bytes())


def load(path):
    return from_bytes(Path(path).read_bytes())
