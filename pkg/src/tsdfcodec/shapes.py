"""Analytic signed-distance primitives and the synthetic block dataset.

Distances are negative inside solids.  All primitives are defined in a local
frame and posed by ``p_world = R @ p_local + t``.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError
from .volume import BLOCK_EDGE, BLOCK_SIZE, D_MAX, D_MIN, normalize

CATEGORIES = ("cuboid", "cylinder", "barrel", "concave_corner", "plane", "empty")
SHAPE_CATEGORIES = CATEGORIES[:-1]

# categories whose signed distance is exact (barrel is a tight lower bound)
EXACT_CATEGORIES = ("cuboid", "cylinder", "concave_corner", "plane")

EXTENT_RANGE = (0.1, 1.0)
AXIS_ALIGNED_PROB = 0.25

PERMUTATIONS = tuple(itertools.permutations(range(3)))

_AXIS_ROTATIONS = Rotation.create_group("O").as_matrix()


@dataclass
class ShapeSpec:
    """A posed primitive.

    ``params`` by category: cuboid ``(sx, sy, sz)`` full edge lengths;
    cylinder ``(radius, height)`` along local z; barrel ``(radius, height)``,
    a sphere cut by the slab ``|z| <= height / 2``; plane, concave_corner and
    empty take none.  The plane is ``z = 0`` with solid below; the concave
    corner is the solid union of the three half-spaces ``x, y, z < 0``.
    """

    category: str
    params: tuple = ()
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        self.params = tuple(float(x) for x in self.params)
        if any(x <= 0 for x in self.params):
            raise ValueError("extents and radii must be positive")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if not (np.allclose(r @ r.T, np.eye(3), atol=1e-9) and np.linalg.det(r) > 0):
            raise ValueError("rotation must be a proper orthonormal matrix")


def _sd_box(q, size):
    d = np.abs(q) - 0.5 * np.asarray(size)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    return outside + inside


def _sd_cylinder(q, radius, height):
    d = np.stack([np.hypot(q[..., 0], q[..., 1]) - radius, np.abs(q[..., 2]) - 0.5 * height], axis=-1)
    return np.minimum(np.max(d, axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)


def _sd_barrel(q, radius, height):
    sphere = np.linalg.norm(q, axis=-1) - radius
    slab = np.abs(q[..., 2]) - 0.5 * height
    return np.maximum(sphere, slab)


def _sd_concave_corner(q):
    # distance to the free octant is the norm of the negative part
    neg = np.minimum(q, 0.0)
    inside = np.any(q < 0, axis=-1)
    return np.where(inside, -np.linalg.norm(neg, axis=-1), np.min(q, axis=-1))


def sdf_eval(shape: ShapeSpec, p) -> np.ndarray:
    """Signed distance from points ``p`` (``(..., 3)``) to ``shape``."""
    p = np.asarray(p, dtype=np.float64)
    q = (p - shape.translation) @ shape.rotation  # R^T (p - t), row-vector form
    c = shape.category
    if c == "cuboid":
        return _sd_box(q, shape.params)
    if c == "cylinder":
        return _sd_cylinder(q, *shape.params)
    if c == "barrel":
        return _sd_barrel(q, *shape.params)
    if c == "concave_corner":
        return _sd_concave_corner(q)
    if c == "plane":
        return q[..., 2].copy()
    return np.full(q.shape[:-1], np.inf)


def block_lattice(window_origin, voxel_size) -> np.ndarray:
    """World positions of the 16^3 window lattice, x-fastest, shape ``(4096, 3)``."""
    i = np.arange(BLOCK_EDGE)
    z, y, x = np.meshgrid(i, i, i, indexing="ij")
    idx = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1)
    return np.asarray(window_origin, dtype=np.float64) + voxel_size * idx


def sample_shape_block(shape: ShapeSpec, window_origin=(0.0, 0.0, 0.0), voxel_size=0.02,
                       d_min=D_MIN, d_max=D_MAX) -> np.ndarray:
    d = sdf_eval(shape, block_lattice(window_origin, voxel_size))
    return normalize(np.clip(d, d_min, d_max), d_min, d_max)


def reflect_block(block, permutation_id: int) -> np.ndarray:
    """Re-index a block by one of the six axis orders (0 is the identity)."""
    if not 0 <= permutation_id < len(PERMUTATIONS):
        raise IndexError(f"permutation_id must be in 0..5, got {permutation_id}")
    cube = np.asarray(block).reshape((BLOCK_EDGE,) * 3, order="F")
    return cube.transpose(PERMUTATIONS[permutation_id]).ravel(order="F")


def inverse_permutation_id(permutation_id: int) -> int:
    inv = tuple(int(i) for i in np.argsort(PERMUTATIONS[permutation_id]))
    return PERMUTATIONS.index(inv)


def random_shape(rng: np.random.Generator, category: str, center, window: float) -> ShapeSpec:
    """Draw a posed shape of ``category`` whose reference point lies within
    half a window of ``center``."""
    lo, hi = EXTENT_RANGE
    if category == "cuboid":
        params = tuple(rng.uniform(lo, hi, 3))
    elif category in ("cylinder", "barrel"):
        params = tuple(rng.uniform(lo, hi, 2))
    else:
        params = ()
    if category in ("plane", "concave_corner") and rng.random() < AXIS_ALIGNED_PROB:
        rotation = _AXIS_ROTATIONS[rng.integers(len(_AXIS_ROTATIONS))]
    else:
        rotation = Rotation.random(random_state=rng).as_matrix()
    translation = np.asarray(center) + rng.uniform(-0.5 * window, 0.5 * window, 3)
    return ShapeSpec(category, params, rotation, translation)


@dataclass
class DatasetSpec:
    sample_count: int
    rng_seed: int = 0
    empty_fraction: float = 0.02
    emptiness_threshold: float = 0.85
    d_min: float = D_MIN
    d_max: float = D_MAX
    block_edge: int = BLOCK_EDGE
    voxel_size: float = 0.02
    max_attempts: int = 200

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")
        if not 0 <= self.empty_fraction <= 1:
            raise ValueError("empty_fraction must lie in [0, 1]")
        if self.block_edge != BLOCK_EDGE:
            raise ValueError("only 16^3 blocks are supported")


@dataclass
class Dataset:
    blocks: np.ndarray          # (m, 4096) float32
    categories: np.ndarray      # (m,) category name per row
    empty: np.ndarray           # (m,) bool, block_mean above the threshold


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Procedurally sample ``spec.sample_count`` blocks.

    ``round(empty_fraction * m)`` slots are reserved for empty blocks (mean
    above the threshold); every other slot is redrawn until it holds surface
    content.  Each slot has its own generator seeded by ``(seed, slot,
    attempt)`` so the result does not depend on evaluation order.
    """
    m = spec.sample_count
    n_empty = int(round(spec.empty_fraction * m))
    master = np.random.default_rng([spec.rng_seed, 0x5EED])
    empty_slots = np.zeros(m, dtype=bool)
    empty_slots[master.choice(m, size=n_empty, replace=False)] = True

    window = spec.block_edge * spec.voxel_size
    center = np.full(3, 0.5 * (spec.block_edge - 1) * spec.voxel_size)
    lattice = block_lattice(np.zeros(3), spec.voxel_size)

    blocks = np.empty((m, BLOCK_SIZE), dtype=np.float32)
    cats = np.empty(m, dtype=object)
    for i in range(m):
        want_empty = empty_slots[i]
        # surface slots keep their category across retries so the kept
        # histogram stays uniform; empty slots redraw it
        choices = CATEGORIES if want_empty else SHAPE_CATEGORIES
        cat = choices[np.random.default_rng([spec.rng_seed, i]).integers(len(choices))]
        for attempt in range(spec.max_attempts):
            rng = np.random.default_rng([spec.rng_seed, i, attempt])
            if want_empty and attempt > 0:
                cat = choices[rng.integers(len(choices))]
            shape = random_shape(rng, cat, center, window)
            d = np.clip(sdf_eval(shape, lattice), spec.d_min, spec.d_max)
            b = normalize(d, spec.d_min, spec.d_max)
            if (b.mean() > spec.emptiness_threshold) == want_empty:
                break
        else:
            raise RuntimeError(
                f"slot {i}: no {'empty' if want_empty else 'non-empty'} block "
                f"within {spec.max_attempts} attempts"
            )
        blocks[i] = b
        cats[i] = cat
    return Dataset(blocks, cats.astype(str), empty_slots)


_TBLK = struct.Struct("<4sQI")


def dataset_to_bytes(blocks) -> bytes:
    blocks = np.asarray(blocks)
    return _TBLK.pack(b"TBLK", blocks.shape[0], BLOCK_EDGE) + blocks.astype("<f4").tobytes()


def dataset_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _TBLK.size:
        raise FormatError("truncated dataset header")
    magic, count, edge = _TBLK.unpack_from(buf)
    if magic != b"TBLK":
        raise FormatError(f"bad dataset magic {magic!r}")
    n = edge ** 3
    if len(buf) != _TBLK.size + 4 * n * count:
        raise FormatError("dataset payload size does not match header")
    return np.frombuffer(buf, dtype="<f4", offset=_TBLK.size).reshape(count, n).astype(np.float32)


def save_dataset(blocks, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(blocks))


def load_dataset(path) -> np.ndarray:
    return dataset_from_bytes(Path(path).read_bytes())
