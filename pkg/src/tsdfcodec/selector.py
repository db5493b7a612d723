"""Descriptor-space selective decompression.

A :class:`DescriptorModel` is a small set of codes describing target
geometry (e.g. horizontal floor planes).  Blocks of a compressed map whose
code lies within ``threshold`` squared distance of any model code are
flagged, and only those are decoded.  PCA-family codes compare over their
common prefix, so a 32-prefix of a 64-code matches a 32-code model.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import CompressedMap, decode_into
from .errors import FormatError, UnsupportedComparison
from .pca import codec_family
from .shapes import ShapeSpec, sample_shape_block
from .volume import BLOCK_EDGE, D_MAX, D_MIN, TsdfVolume

PLANE_OFFSETS = np.linspace(0.5, BLOCK_EDGE - 1.5, 15)
_HEADER = struct.Struct("<4sIdII")


@dataclass
class DescriptorModel:
    codes: np.ndarray      # (n, code_length)
    codec_id: str
    threshold: float = 0.0
    label: str = ""

    def __post_init__(self):
        self.codes = np.atleast_2d(np.asarray(self.codes, dtype=np.float64))
        if len(self.codes) == 0:
            raise ValueError("descriptor model needs at least one code")

    @property
    def code_length(self) -> int:
        return self.codes.shape[1]

    def to_bytes(self) -> bytes:
        label = self.label.encode("utf-8")
        cid = self.codec_id.encode("ascii")
        return b"".join([
            _HEADER.pack(b"DESC", 1, self.threshold, self.code_length, len(self.codes)),
            struct.pack("<H", len(label)), label,
            struct.pack("<H", len(cid)), cid,
            self.codes.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DescriptorModel":
        try:
            magic, version, thr, length, count = _HEADER.unpack_from(buf)
            if magic != b"DESC":
                raise FormatError(f"bad descriptor model magic {magic!r}")
            if version != 1:
                raise FormatError(f"unsupported descriptor model version {version}")
            off = _HEADER.size
            (n,) = struct.unpack_from("<H", buf, off)
            label = buf[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            (n,) = struct.unpack_from("<H", buf, off)
            cid = buf[off + 2:off + 2 + n].decode("ascii")
            off += 2 + n
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"malformed descriptor model: {exc}") from exc
        if len(buf) != off + 4 * length * count:
            raise FormatError("descriptor code payload size does not match header")
        codes = np.frombuffer(buf, "<f4", length * count, off).reshape(count, length)
        return cls(codes.astype(np.float64), cid, thr, label)


def plane_blocks(offsets=PLANE_OFFSETS, voxel_size: float = 0.02, d_min=D_MIN, d_max=D_MAX) -> np.ndarray:
    """Blocks of a +z-facing horizontal plane ``offset`` voxels above the window floor."""
    plane = ShapeSpec("plane", (), np.eye(3), (0.0, 0.0, 0.0))
    return np.stack([
        sample_shape_block(plane, (0.0, 0.0, -off * voxel_size), voxel_size, d_min, d_max) for off in offsets
    ])


def build_plane_model(codec, offsets=PLANE_OFFSETS, voxel_size: float = 0.02, threshold: float = 0.0,
                      label: str = "floor", d_min=D_MIN, d_max=D_MAX) -> DescriptorModel:
    codes = codec.encode(plane_blocks(offsets, voxel_size, d_min, d_max))
    return DescriptorModel(codes, codec.codec_id, threshold, label)


def _compatible_length(model_id: str, model_len: int, codes_id: str, codes_len: int) -> int:
    if codec_family(model_id) == codec_family(codes_id) == "pca":
        return min(model_len, codes_len)
    if model_id != codes_id or model_len != codes_len:
        raise UnsupportedComparison(f"cannot compare {codes_id} codes against a {model_id} model")
    return model_len


def min_distances(codes, codes_id: str, model: DescriptorModel) -> np.ndarray:
    """Min squared (prefix) distance from each code to the model."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    n = _compatible_length(model.codec_id, model.code_length, codes_id, codes.shape[1])
    a, m = codes[:, :n], model.codes[:, :n]
    # direct differences keep identical codes at exactly zero
    out = np.full(len(a), np.inf)
    for row in m:
        diff = a - row
        np.minimum(out, np.einsum("ij,ij->i", diff, diff), out=out)
    return out


def match_blocks(cmap: CompressedMap, model: DescriptorModel, threshold: float | None = None):
    """Per-block ``(min squared distance, flag)`` in table order.

    Empty blocks get distance ``inf`` and are never flagged.  The flag uses a
    strict ``<``, so a zero threshold flags nothing.
    """
    threshold = model.threshold if threshold is None else threshold
    dist = np.full(cmap.n_blocks, np.inf)
    if cmap.n_coded:
        dist[~cmap.empty] = min_distances(cmap.codes, cmap.codec_id, model)
    return dist, dist < threshold


def selective_decompress(cmap: CompressedMap, flags, codec, workers: int = 1) -> TsdfVolume:
    """Decode flagged blocks only; the rest stays unobserved free space."""
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != (cmap.n_blocks,):
        raise ValueError("flags must align with the block table")
    return decode_into(cmap, codec, flags, workers)


def calibrate_threshold(distances, labels) -> float:
    """Squared-distance cutoff separating positive from negative blocks.

    With separable classes this is the midpoint between the largest
    positive and the smallest negative distance.  Otherwise the cutoff
    maximising F1 is returned.
    """
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    finite = np.isfinite(d)
    d, y = d[finite], y[finite]
    if not y.any():
        raise ValueError("no positive examples to calibrate on")
    pos_max = d[y].max()
    neg_min = d[~y].min() if (~y).any() else np.inf
    if pos_max < neg_min:
        return float(pos_max + 0.5 * (neg_min - pos_max)) if np.isfinite(neg_min) else float(2 * pos_max + 1e-12)
    cands = np.unique(d)
    cuts = np.append(0.5 * (cands[:-1] + cands[1:]), cands[-1] + 1e-12)
    best, best_f1 = cuts[0], -1.0
    for c in cuts:
        flag = d < c
        tp = np.sum(flag & y)
        f1 = 2 * tp / (flag.sum() + y.sum())
        if f1 > best_f1:
            best, best_f1 = c, f1
    return float(best)


def precision_recall(flags, labels) -> tuple[float, float]:
    flags = np.asarray(flags, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    tp = np.sum(flags & labels)
    precision = tp / flags.sum() if flags.any() else float("nan")
    recall = tp / labels.sum() if labels.any() else float("nan")
    return float(precision), float(recall)


def save(model: DescriptorModel, path) -> None:
    Path(path).write_bytes(model.to_bytes())


def load(path) -> DescriptorModel:
    return DescriptorModel.from_bytes(Path(path).read_bytes())
