"""Linear block codec: per-block mean slot plus projection onto a PCA basis."""
from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import CodecError, FormatError, UnsupportedComparison
from .volume import BLOCK_SIZE

log = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sI")

# singular values below this fraction of the largest count as rank deficiency
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class CodeVector:
    values: np.ndarray
    codec_id: str

    def __len__(self):
        return len(self.values)


def codec_family(codec_id: str) -> str:
    """``pca64`` -> ``pca``, ``parallel64+64`` -> ``parallel``."""
    return re.sub(r"[0-9+\-]", "", codec_id)


@dataclass(frozen=True)
class PcaCodec:
    """``basis`` rows are orthonormal, orthogonal to the constant block and
    sorted by decreasing singular value.  ``n_padded`` trailing rows come
    from an orthonormal completion when the data had rank below ``k``."""

    basis: np.ndarray
    singular_values: np.ndarray
    n_padded: int = 0

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    @property
    def code_length(self) -> int:
        return self.k + 1

    @property
    def codec_id(self) -> str:
        return f"pca{self.code_length}"

    def encode(self, blocks) -> np.ndarray:
        """``[mean, basis @ (b - mean)]`` for one block or a stack of blocks."""
        x = np.asarray(blocks, dtype=np.float64)
        mean = x.mean(axis=-1, keepdims=True)
        coeffs = (x - mean) @ self.basis.T
        return np.concatenate([mean, coeffs], axis=-1)

    def decode(self, codes) -> np.ndarray:
        c = np.asarray(codes, dtype=np.float64)
        if c.shape[-1] != self.code_length:
            raise CodecError(f"{self.codec_id} expects codes of length {self.code_length}, got {c.shape[-1]}")
        return np.clip(c[..., :1] + c[..., 1:] @ self.basis, 0.0, 1.0)

    def encode_vector(self, block) -> CodeVector:
        return CodeVector(self.encode(block), self.codec_id)

    def decode_vector(self, code: CodeVector) -> np.ndarray:
        if codec_family(code.codec_id) != "pca":
            raise CodecError(f"cannot decode {code.codec_id} codes with {self.codec_id}")
        return self.decode(code.values)

    def to_bytes(self) -> bytes:
        return b"".join([
            _HEADER.pack(b"PCAC", self.k),
            self.singular_values.astype("<f4").tobytes(),
            self.basis.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PcaCodec":
        if len(buf) < _HEADER.size:
            raise FormatError("truncated PCA codec header")
        magic, k = _HEADER.unpack_from(buf)
        if magic != b"PCAC":
            raise FormatError(f"bad PCA codec magic {magic!r}")
        if len(buf) != _HEADER.size + 4 * k * (1 + BLOCK_SIZE):
            raise FormatError("PCA codec payload size does not match header")
        arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).astype(np.float64)
        sv = arr[:k]
        basis = arr[k:].reshape(k, BLOCK_SIZE)
        return cls(basis, sv, int(np.count_nonzero(sv == 0)))


def _top_subspace(xc: np.ndarray, k: int) -> np.ndarray:
    """Orthonormal ``(n, k)`` basis of the dominant right singular subspace."""
    m, n = xc.shape
    if m >= n:
        gram = xc.T @ xc
        _, v = scipy.linalg.eigh(gram, subset_by_index=[n - k, n - 1], driver="evr")
    else:
        gram = xc @ xc.T
        _, u = scipy.linalg.eigh(gram, subset_by_index=[m - k, m - 1], driver="evr")
        v = xc.T @ u
    q, _ = np.linalg.qr(v)
    return q


def _orthonormal_completion(kept: np.ndarray, count: int, n: int) -> np.ndarray:
    """``count`` unit rows orthogonal to ``kept`` rows and to the constant block."""
    filler = np.random.default_rng(0).standard_normal((n, count))
    m = np.hstack([np.full((n, 1), 1 / np.sqrt(n)), kept.T, filler])
    q, _ = np.linalg.qr(m)
    return q[:, 1 + kept.shape[0]:].T


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(basis.shape[0]), idx])
    signs[signs == 0] = 1
    return basis * signs[:, None]


def fit(data, k: int) -> PcaCodec:
    """Fit a ``k``-component basis to an ``(m, 4096)`` block matrix.

    Each row is centred by its own scalar mean.  The dominant subspace comes
    from a partial symmetric eigensolve of the Gram matrix; an SVD of the data
    projected onto it then yields accurate singular values and vectors.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != BLOCK_SIZE:
        raise ValueError(f"expected an (m, {BLOCK_SIZE}) block matrix, got {x.shape}")
    m, n = x.shape
    if not 0 < k < m:
        raise ValueError(f"need 0 < k < m, got k={k}, m={m}")
    if k >= n:
        raise ValueError(f"k={k} must be below the block size {n}")
    xc = x - x.mean(axis=1, keepdims=True)
    q = _top_subspace(xc, k)
    _, s, wt = np.linalg.svd(xc @ q, full_matrices=False)
    basis = wt @ q.T

    rank = int(np.count_nonzero(s > RANK_RTOL * max(s[0], np.finfo(float).tiny)))
    n_padded = k - rank
    if n_padded:
        log.warning("data has rank %d < k=%d; padding %d components", rank, k, n_padded)
        basis = np.vstack([basis[:rank], _orthonormal_completion(basis[:rank], n_padded, n)])
        s = np.concatenate([s[:rank], np.zeros(n_padded)])
    return PcaCodec(_fix_signs(basis), s, n_padded)


def prefix_distance(a: CodeVector, b: CodeVector) -> float:
    """Squared distance over the common prefix of two PCA-family codes."""
    for c in (a, b):
        if codec_family(c.codec_id) != "pca":
            raise UnsupportedComparison(f"prefix comparison needs PCA codes, got {c.codec_id}")
    n = min(len(a), len(b))
    d = np.asarray(a.values[:n], dtype=np.float64) - np.asarray(b.values[:n], dtype=np.float64)
    return float(d @ d)


def save(codec: PcaCodec, path) -> None:
    Path(path).write_bytes(codec.to_bytes())


def load(path) -> PcaCodec:
    return PcaCodec.from_bytes(Path(path).read_bytes())
