"""Dense TSDF volumes, 16^3 block access and the Gaussian-blur baseline.

Voxel ``(i, j, k)`` stores the truncated distance at world position
``origin + voxel_size * (i, j, k)``.  Arrays are indexed ``[i, j, k]``
(x, y, z); flattened forms (blocks, files) are x-fastest, i.e. Fortran order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError

BLOCK_EDGE = 16
BLOCK_SIZE = BLOCK_EDGE ** 3

D_MIN = -0.04
D_MAX = 0.1

_MAGIC = b"TSDF"
_VERSION = 1
_HEADER = struct.Struct("<4sI3If3fffI")


@dataclass
class TsdfVolume:
    values: np.ndarray
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_min: float = D_MIN
    d_max: float = D_MAX
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("values must be a 3-D array")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not self.d_min < 0 < self.d_max:
            raise ValueError("truncation bounds must satisfy d_min < 0 < d_max")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float32)
            if self.weights.shape != self.values.shape:
                raise ValueError("weights must match values in shape")

    @classmethod
    def empty(cls, dims, voxel_size, origin=(0.0, 0.0, 0.0), d_min=D_MIN, d_max=D_MAX):
        """Unobserved volume: every voxel at ``d_max`` with zero weight."""
        dims = tuple(int(d) for d in dims)
        return cls(
            values=np.full(dims, d_max, dtype=np.float32),
            voxel_size=voxel_size,
            origin=np.asarray(origin, dtype=np.float64),
            d_min=d_min,
            d_max=d_max,
            weights=np.zeros(dims, dtype=np.float32),
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def block_grid(self) -> tuple[int, int, int]:
        """Number of whole blocks per axis; trailing partial blocks are ignored."""
        return tuple(d // BLOCK_EDGE for d in self.dims)

    @property
    def n_blocks(self) -> int:
        nx, ny, nz = self.block_grid
        return nx * ny * nz

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(
            self.values.copy(), self.voxel_size, self.origin.copy(), self.d_min,
            self.d_max, None if self.weights is None else self.weights.copy(),
        )

    def same_geometry(self, other: "TsdfVolume") -> bool:
        return (
            self.dims == other.dims
            and np.float32(self.voxel_size) == np.float32(other.voxel_size)
            and np.array_equal(self.origin.astype(np.float32), other.origin.astype(np.float32))
            and np.float32(self.d_min) == np.float32(other.d_min)
            and np.float32(self.d_max) == np.float32(other.d_max)
        )

    def world_to_index(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.origin) / self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxels, shape ``dims + (3,)``."""
        axes = [np.arange(n) * self.voxel_size + o for n, o in zip(self.dims, self.origin)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def normalize(values, d_min=D_MIN, d_max=D_MAX):
    return (np.asarray(values, dtype=np.float64) - d_min) / (d_max - d_min)


def denormalize(values, d_min=D_MIN, d_max=D_MAX):
    return np.asarray(values, dtype=np.float64) * (d_max - d_min) + d_min


def sample_trilinear(vol: TsdfVolume, p) -> np.ndarray:
    """Trilinearly interpolate the field at world points ``p`` (shape ``(..., 3)``).

    Points outside the interpolable interior (voxel-index coordinates not in
    ``[0, dim - 1]``) give NaN so callers can drop them.
    """
    u = vol.world_to_index(p)
    dims = np.array(vol.dims)
    inside = np.all((u >= 0) & (u <= dims - 1), axis=-1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.maximum(dims - 2, 0))
    f = u - i0
    v = vol.values
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = x0 + 1, y0 + 1, z0 + 1
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    # the clip keeps indices valid for outside points; those are masked below
    x1 = np.minimum(x1, dims[0] - 1)
    y1 = np.minimum(y1, dims[1] - 1)
    z1 = np.minimum(z1, dims[2] - 1)
    out = (
        v[x0, y0, z0] * gx * gy * gz
        + v[x1, y0, z0] * fx * gy * gz
        + v[x0, y1, z0] * gx * fy * gz
        + v[x1, y1, z0] * fx * fy * gz
        + v[x0, y0, z1] * gx * gy * fz
        + v[x1, y0, z1] * fx * gy * fz
        + v[x0, y1, z1] * gx * fy * fz
        + v[x1, y1, z1] * fx * fy * fz
    )
    return np.where(inside, out, np.nan)


def gradient(vol: TsdfVolume, p) -> np.ndarray:
    """Central-difference gradient of the interpolated field, step one voxel.

    Returns shape ``(..., 3)``; NaN where any stencil point leaves the volume.
    """
    p = np.asarray(p, dtype=np.float64)
    h = vol.voxel_size
    g = np.empty(p.shape, dtype=np.float64)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        g[..., axis] = (sample_trilinear(vol, p + step) - sample_trilinear(vol, p - step)) / (2 * h)
    return g


def _check_index(vol: TsdfVolume, idx) -> tuple[int, int, int]:
    idx = tuple(int(i) for i in idx)
    if len(idx) != 3 or any(i < 0 or i >= n for i, n in zip(idx, vol.block_grid)):
        raise IndexError(f"block index {idx} outside block grid {vol.block_grid}")
    return idx


def _block_slices(idx):
    return tuple(slice(BLOCK_EDGE * i, BLOCK_EDGE * (i + 1)) for i in idx)


def extract_block(vol: TsdfVolume, idx) -> np.ndarray:
    """Normalized 4096-vector of block ``idx`` (x-fastest)."""
    idx = _check_index(vol, idx)
    sub = vol.values[_block_slices(idx)]
    return normalize(sub, vol.d_min, vol.d_max).ravel(order="F")


def insert_block(vol: TsdfVolume, idx, block) -> None:
    idx = _check_index(vol, idx)
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (BLOCK_SIZE,):
        raise ValueError(f"block must have {BLOCK_SIZE} values")
    sub = denormalize(block, vol.d_min, vol.d_max).reshape((BLOCK_EDGE,) * 3, order="F")
    vol.values[_block_slices(idx)] = sub


def block_indices(vol: TsdfVolume) -> list[tuple[int, int, int]]:
    """All whole-block indices in table order (bx fastest, then by, then bz)."""
    nx, ny, nz = vol.block_grid
    return [(bx, by, bz) for bz in range(nz) for by in range(ny) for bx in range(nx)]


def extract_blocks(vol: TsdfVolume) -> np.ndarray:
    """All whole blocks as an ``(n_blocks, 4096)`` array in :func:`block_indices` order."""
    nx, ny, nz = vol.block_grid
    e = BLOCK_EDGE
    v = vol.values[: nx * e, : ny * e, : nz * e].reshape(nx, e, ny, e, nz, e)
    # -> (bz, by, bx, z, y, x) so that C-order flattening is x-fastest at both levels
    v = v.transpose(4, 2, 0, 5, 3, 1).reshape(nx * ny * nz, BLOCK_SIZE)
    return normalize(v, vol.d_min, vol.d_max)


def insert_blocks(vol: TsdfVolume, blocks, mask=None) -> None:
    """Write blocks (table order) back into ``vol``; ``mask`` selects which ones."""
    nx, ny, nz = vol.block_grid
    e = BLOCK_EDGE
    blocks = np.asarray(blocks, dtype=np.float64).reshape(nz, ny, nx, e, e, e)
    new = denormalize(blocks, vol.d_min, vol.d_max).astype(np.float32)
    region = np.ascontiguousarray(vol.values[: nx * e, : ny * e, : nz * e])
    cur = region.reshape(nx, e, ny, e, nz, e).transpose(4, 2, 0, 5, 3, 1)  # view into region
    if mask is None:
        cur[...] = new
    else:
        mask = np.asarray(mask, dtype=bool).reshape(nz, ny, nx)
        cur[mask] = new[mask]
    vol.values[: nx * e, : ny * e, : nz * e] = region


def block_mean(block) -> float:
    return float(np.mean(block))


def gaussian_kernel(size: int = 9, sigma: float = 4 / 3) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(vol: TsdfVolume, kernel_size: int = 9, sigma: float = 4 / 3) -> TsdfVolume:
    """Separable Gaussian blur with clamp-to-edge borders, re-clamped to the truncation band."""
    if min(vol.dims) < kernel_size:
        raise ValueError(f"volume {vol.dims} smaller than the {kernel_size}-tap kernel")
    taps = gaussian_kernel(kernel_size, sigma)
    out = vol.values.astype(np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, taps, axis=axis, mode="nearest")
    out = np.clip(out, vol.d_min, vol.d_max)
    blurred = vol.copy()
    blurred.values = out.astype(np.float32)
    return blurred


def to_bytes(vol: TsdfVolume) -> bytes:
    has_weights = vol.weights is not None
    header = _HEADER.pack(
        _MAGIC, _VERSION, *vol.dims, vol.voxel_size, *vol.origin,
        vol.d_min, vol.d_max, int(has_weights),
    )
    parts = [header, vol.values.astype("<f4").ravel(order="F").tobytes()]
    if has_weights:
        parts.append(vol.weights.astype("<f4").ravel(order="F").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> TsdfVolume:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated volume header")
    magic, version, nx, ny, nz, vs, ox, oy, oz, dmin, dmax, flags = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise FormatError(f"bad volume magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported volume version {version}")
    n = nx * ny * nz
    expected = _HEADER.size + 4 * n * (2 if flags & 1 else 1)
    if len(buf) != expected:
        raise FormatError(f"volume payload has {len(buf)} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    values = arr[:n].reshape((nx, ny, nz), order="F").astype(np.float32)
    weights = arr[n:].reshape((nx, ny, nz), order="F").astype(np.float32) if flags & 1 else None
    return TsdfVolume(values, float(vs), np.array([ox, oy, oz]), float(dmin), float(dmax), weights)


def save(vol: TsdfVolume, path) -> None:
    Path(path).write_bytes(to_bytes(vol))


def load(path) -> TsdfVolume:
    return from_bytes(Path(path).read_bytes())
