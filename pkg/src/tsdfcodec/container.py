"""Compressed-map container: a block table of codes plus volume geometry.

File layout (little-endian, version 1)::

    "TMAP" u32 version
    16s codec id (ascii, NUL padded)   32s sha256 of the codec file bytes
    3*u32 dims  f32 voxel_size  3*f32 origin  f32 d_min  f32 d_max
    f32 empty_threshold  u32 code_length  u32 n_blocks
    u64 inline codec length, inline codec bytes (may be empty)
    ceil(n_blocks / 8) bytes empty-flag bitmap (little bit order)
    n_coded * code_length f32 codes, table order

The codec is referenced by content hash so that many maps can share one
codebook; embedding it inline makes a map self-contained.
"""
from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import hybrid
from .errors import ConfigError, FormatError
from .pca import PcaCodec
from .volume import BLOCK_EDGE, BLOCK_SIZE, D_MAX, D_MIN, TsdfVolume, extract_blocks, insert_blocks

_MAGIC = b"TMAP"
_VERSION = 1
_HEADER = struct.Struct("<4sI16s32s3If3ffffIIQ")
EMPTY_THRESHOLD = 0.85
CHUNK = 4096


def codec_bytes(codec) -> bytes:
    return codec.to_bytes()


def codec_hash(codec) -> bytes:
    return hashlib.sha256(codec_bytes(codec)).digest()


def load_codec_bytes(buf: bytes):
    """Deserialize any codec file by its magic."""
    magic = buf[:4]
    if magic == b"PCAC":
        return PcaCodec.from_bytes(buf)
    if magic == b"AENC":
        return ae.MlpAutoencoder.from_bytes(buf)
    if magic == b"HYBC":
        return hybrid.from_bytes(buf)
    raise FormatError(f"unknown codec magic {magic!r}")


def load_codec(path):
    return load_codec_bytes(Path(path).read_bytes())


@dataclass
class CompressedMap:
    codec_id: str
    codec_sha256: bytes
    dims: tuple
    voxel_size: float
    origin: tuple
    d_min: float
    d_max: float
    empty_threshold: float
    code_length: int
    empty: np.ndarray          # (n_blocks,) bool, table order
    codes: np.ndarray          # (n_coded, code_length) float32
    inline_codec: bytes = b""

    def __post_init__(self):
        self.empty = np.asarray(self.empty, dtype=bool)
        self.codes = np.asarray(self.codes, dtype=np.float32).reshape(-1, self.code_length)
        grid = tuple(int(d) // BLOCK_EDGE for d in self.dims)
        if len(self.empty) != int(np.prod(grid)):
            raise FormatError(f"block table has {len(self.empty)} entries, tiling needs {int(np.prod(grid))}")
        if len(self.codes) != int((~self.empty).sum()):
            raise FormatError("number of codes does not match the non-empty block count")

    @property
    def n_blocks(self) -> int:
        return len(self.empty)

    @property
    def n_coded(self) -> int:
        return len(self.codes)

    def geometry_volume(self) -> TsdfVolume:
        """Unobserved volume with this map's geometry."""
        return TsdfVolume.empty(self.dims, self.voxel_size, self.origin, self.d_min, self.d_max)

    def full_codes(self) -> np.ndarray:
        """Codes scattered to the full table; empty rows are NaN."""
        out = np.full((self.n_blocks, self.code_length), np.nan, dtype=np.float32)
        out[~self.empty] = self.codes
        return out

    def to_bytes(self) -> bytes:
        cid = self.codec_id.encode("ascii")
        if len(cid) > 16:
            raise ValueError("codec id longer than 16 characters")
        header = _HEADER.pack(
            _MAGIC, _VERSION, cid, self.codec_sha256, *(int(d) for d in self.dims), self.voxel_size,
            *self.origin, self.d_min, self.d_max, self.empty_threshold, self.code_length, self.n_blocks,
            len(self.inline_codec),
        )
        bitmap = np.packbits(self.empty, bitorder="little").tobytes()
        return b"".join([header, self.inline_codec, bitmap, self.codes.astype("<f4").tobytes()])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CompressedMap":
        if len(buf) < _HEADER.size:
            raise FormatError("truncated compressed-map header")
        (magic, version, cid, sha, nx, ny, nz, vs, ox, oy, oz, d_min, d_max, thr,
         length, n_blocks, n_inline) = _HEADER.unpack_from(buf)
        if magic != _MAGIC:
            raise FormatError(f"bad compressed-map magic {magic!r}")
        if version != _VERSION:
            raise FormatError(f"unsupported compressed-map version {version}")
        off = _HEADER.size
        inline = bytes(buf[off:off + n_inline])
        off += n_inline
        n_bitmap = (n_blocks + 7) // 8
        if len(buf) < off + n_bitmap:
            raise FormatError("truncated block table")
        empty = np.unpackbits(np.frombuffer(buf, np.uint8, n_bitmap, off), count=n_blocks, bitorder="little").astype(bool)
        off += n_bitmap
        n_coded = int((~empty).sum())
        if len(buf) != off + 4 * n_coded * length:
            raise FormatError("code payload size does not match the block table")
        codes = np.frombuffer(buf, "<f4", n_coded * length, off).reshape(n_coded, length).astype(np.float32)
        return cls(cid.rstrip(b"\0").decode("ascii"), sha, (nx, ny, nz), vs, (ox, oy, oz), d_min, d_max, thr,
                   length, empty, codes, inline)

    def sizes(self) -> dict:
        """Byte accounting: raw f32 blocks vs. code payload, header separate."""
        raw = self.n_coded * BLOCK_SIZE * 4
        payload = self.n_coded * self.code_length * 4
        total = len(self.to_bytes())
        return {
            "raw_block_bytes": raw,
            "payload_bytes": payload,
            "payload_ratio": BLOCK_SIZE / self.code_length,
            "header_bytes": total - payload,
            "file_bytes": total,
            "n_blocks": self.n_blocks,
            "n_coded": self.n_coded,
            "n_empty": self.n_blocks - self.n_coded,
        }


def _chunked(fn, x, workers: int):
    chunks = [x[s:s + CHUNK] for s in range(0, len(x), CHUNK)]
    if not chunks:
        return []
    if workers <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, chunks))


def compress(vol: TsdfVolume, codec, empty_threshold: float = EMPTY_THRESHOLD, inline: bool = False,
             truncation=(D_MIN, D_MAX), workers: int = 1) -> CompressedMap:
    """Encode every block whose mean is at most ``empty_threshold``.

    ``truncation`` is the ``(d_min, d_max)`` the codec was trained with.
    """
    if not np.allclose((vol.d_min, vol.d_max), truncation, rtol=0, atol=1e-6):
        raise ConfigError(f"volume truncation ({vol.d_min}, {vol.d_max}) does not match codec truncation {tuple(truncation)}")
    blocks = extract_blocks(vol)
    empty = blocks.mean(axis=1) > empty_threshold
    coded = blocks[~empty]
    parts = _chunked(codec.encode, coded, workers)
    codes = np.concatenate(parts) if parts else np.zeros((0, codec.code_length))
    raw = codec_bytes(codec)
    return CompressedMap(codec.codec_id, hashlib.sha256(raw).digest(), vol.dims, float(vol.voxel_size),
                         tuple(float(o) for o in vol.origin), float(vol.d_min), float(vol.d_max),
                         float(empty_threshold), codec.code_length, empty, codes, raw if inline else b"")


def resolve_codec(cmap: CompressedMap, candidates=()):
    """The inline codec, else the first candidate (codec object or path) whose hash matches."""
    if cmap.inline_codec:
        if hashlib.sha256(cmap.inline_codec).digest() != cmap.codec_sha256:
            raise FormatError("inline codec does not match its recorded hash")
        return load_codec_bytes(cmap.inline_codec)
    for c in candidates:
        raw = Path(c).read_bytes() if isinstance(c, (str, Path)) else codec_bytes(c)
        if hashlib.sha256(raw).digest() == cmap.codec_sha256:
            return c if not isinstance(c, (str, Path)) else load_codec_bytes(raw)
    raise FormatError(f"codec {cmap.codec_id} ({cmap.codec_sha256.hex()[:12]}) not found")


def decode_into(cmap: CompressedMap, codec, mask=None, workers: int = 1) -> TsdfVolume:
    """Decode coded blocks selected by ``mask`` (table order, default all).

    Everything else stays at ``d_max`` with weight 0; decoded voxels get weight 1.
    """
    if codec.codec_id != cmap.codec_id:
        raise FormatError(f"map was coded with {cmap.codec_id}, got {codec.codec_id}")
    vol = cmap.geometry_volume()
    sel = ~cmap.empty if mask is None else (np.asarray(mask, dtype=bool) & ~cmap.empty)
    if not sel.any():
        return vol
    codes = cmap.full_codes()[sel]
    parts = _chunked(codec.decode, codes, workers)
    full = np.ones((cmap.n_blocks, BLOCK_SIZE))
    full[sel] = np.concatenate(parts)
    insert_blocks(vol, full, sel)
    nx, ny, nz = vol.block_grid
    e = BLOCK_EDGE
    cover = sel.reshape(nz, ny, nx).transpose(2, 1, 0)
    for ax in range(3):
        cover = np.repeat(cover, e, axis=ax)
    vol.weights[: nx * e, : ny * e, : nz * e] = cover
    return vol


def decompress(cmap: CompressedMap, codec=None, workers: int = 1) -> TsdfVolume:
    codec = codec if codec is not None else resolve_codec(cmap)
    return decode_into(cmap, codec, None, workers)


@dataclass
class ReconReport:
    block_mse: np.ndarray
    hist_edges: np.ndarray
    hist_counts: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.block_mse.mean()) if len(self.block_mse) else float("nan")

    @property
    def std(self) -> float:
        return float(self.block_mse.std()) if len(self.block_mse) else float("nan")

    def records(self) -> list[str]:
        lines = [f"n_blocks={len(self.block_mse)}", f"mean_mse={self.mean:.9g}", f"std_mse={self.std:.9g}"]
        for lo, hi, n in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts):
            lines.append(f"hist[{lo:.3g},{hi:.3g})={int(n)}")
        return lines

    def table(self) -> str:
        rows = [f"{'blocks':>10} {'mean MSE':>12} {'std':>12}",
                f"{len(self.block_mse):>10d} {self.mean:>12.6g} {self.std:>12.6g}"]
        return "\n".join(rows)


HIST_EDGES = np.array([0.0, 1e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 1.0])


def evaluate_recon(original: TsdfVolume, reconstructed: TsdfVolume,
                   empty_threshold: float = EMPTY_THRESHOLD) -> ReconReport:
    """Per-block normalized MSE over the original's non-empty blocks."""
    if not original.same_geometry(reconstructed):
        raise ValueError("volumes differ in geometry")
    a = extract_blocks(original)
    b = extract_blocks(reconstructed)
    keep = a.mean(axis=1) <= empty_threshold
    mse = np.mean((a[keep].astype(np.float64) - b[keep]) ** 2, axis=1)
    counts, _ = np.histogram(np.clip(mse, 0, HIST_EDGES[-1]), HIST_EDGES)
    return ReconReport(mse, HIST_EDGES, counts)


def save(cmap: CompressedMap, path) -> None:
    Path(path).write_bytes(cmap.to_bytes())


def load(path) -> CompressedMap:
    return CompressedMap.from_bytes(Path(path).read_bytes())
