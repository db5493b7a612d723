"""Synthetic scenes: unions of primitives, volume sampling and depth rendering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .ingest import DepthFrame, Intrinsics, Pose
from .shapes import ShapeSpec, sdf_eval
from .volume import BLOCK_EDGE, D_MAX, D_MIN, TsdfVolume, sample_trilinear

DEFAULT_INTRINSICS = Intrinsics(150.0, 150.0, 79.5, 59.5)
DEFAULT_IMAGE = (160, 120)


@dataclass
class Scene:
    shapes: list[ShapeSpec] = field(default_factory=list)

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = np.full(p.shape[:-1], np.inf)
        for s in self.shapes:
            out = np.minimum(out, sdf_eval(s, p))
        return out


def scene_volume(scene: Scene, dims, voxel_size, origin=(0.0, 0.0, 0.0), d_min=D_MIN, d_max=D_MAX) -> TsdfVolume:
    """Truncated scene distances at voxel centres (every voxel marked observed)."""
    vol = TsdfVolume.empty(dims, voxel_size, origin, d_min, d_max)
    centers = vol.voxel_centers()
    for x in range(vol.dims[0]):
        vol.values[x] = np.clip(scene.sdf(centers[x]), d_min, d_max)
    vol.weights[...] = 1.0
    return vol


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world 4x4 with z forward, x right, y down."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    t = np.eye(4)
    t[:3, :3] = np.stack([x, y, z], axis=1)
    t[:3, 3] = eye
    return t


def pixel_rays(intrinsics: Intrinsics, width: int, height: int) -> np.ndarray:
    """Camera-frame ray directions with unit z component, ``(h, w, 3)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)], axis=-1)


def render_depth(field_fn, cam_to_world, intrinsics: Intrinsics = DEFAULT_INTRINSICS,
                 size=DEFAULT_IMAGE, max_depth: float = 6.0, min_step: float = 0.005,
                 max_steps: int = 600, bisections: int = 40) -> np.ndarray:
    """Z-depth image of the first zero crossing of ``field_fn`` along each pixel ray.

    ``field_fn`` maps world points ``(n, 3)`` to signed distances, NaN outside
    its domain.  Rays march by the field value (at least ``min_step``) and the
    crossing is refined by bisection.  Misses give depth 0.
    """
    width, height = size
    dirs_c = pixel_rays(intrinsics, width, height).reshape(-1, 3)
    r = np.asarray(cam_to_world)[:3, :3]
    origin = np.asarray(cam_to_world)[:3, 3]
    dirs = dirs_c @ r.T
    scale = np.linalg.norm(dirs, axis=1)  # metres of travel per unit z-depth
    n = len(dirs)
    z = np.zeros(n)
    z_prev = np.zeros(n)
    f = field_fn(origin + dirs * z[:, None])
    active = np.isfinite(f) & (f > 0)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        z_prev[idx] = z[idx]
        z[idx] += np.maximum(f[idx], min_step) / scale[idx]
        f_new = field_fn(origin + dirs[idx] * z[idx, None])
        crossed = np.isfinite(f_new) & (f_new <= 0)
        gone = ~np.isfinite(f_new) | (z[idx] > max_depth)
        hit[idx[crossed]] = True
        f[idx] = f_new
        active[idx[crossed | gone]] = False
    idx = np.flatnonzero(hit)
    lo, hi = z_prev[idx].copy(), z[idx].copy()
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        fm = field_fn(origin + dirs[idx] * mid[:, None])
        inside = ~(fm > 0)
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
    depth = np.zeros(n)
    depth[idx] = 0.5 * (lo + hi)
    depth[(depth < 0) | (depth > max_depth)] = 0.0
    return depth.reshape(height, width)


def render_frame(field_fn, pose: Pose, intrinsics: Intrinsics = DEFAULT_INTRINSICS, size=DEFAULT_IMAGE,
                 noise_sigma: float = 0.0, rng: np.random.Generator | None = None, **kw) -> DepthFrame:
    depth = render_depth(field_fn, pose.matrix(), intrinsics, size, **kw)
    if noise_sigma > 0:
        rng = rng or np.random.default_rng()
        valid = depth > 0
        depth[valid] += rng.normal(0.0, noise_sigma, valid.sum())
        depth[depth < 0] = 0.0
    return DepthFrame(depth, intrinsics, pose.timestamp)


def volume_field(vol: TsdfVolume):
    return lambda p: sample_trilinear(vol, p)


def _plane(point, normal) -> ShapeSpec:
    """Half-space with solid on the side opposite ``normal``."""
    normal = np.asarray(normal, dtype=np.float64)
    rot, _ = Rotation.align_vectors([normal], [[0.0, 0.0, 1.0]])
    return ShapeSpec("plane", (), rot.as_matrix(), point)


def _yaw(angle) -> np.ndarray:
    return Rotation.from_euler("z", angle).as_matrix()


ROOM_EXTENT = (2.56, 2.56, 1.6)


def cluttered_room(seed: int = 0, n_objects: int = 6, floor_height: float = 0.1) -> Scene:
    """Floor, two walls and ``n_objects`` boxes/cylinders/barrels on the floor.

    The floor is always ``shapes[0]``.
    """
    rng = np.random.default_rng(seed)
    f = floor_height
    shapes = [
        _plane([0, 0, f], [0, 0, 1]),
        _plane([0, 2.3, 0], [0, -1, 0]),
        _plane([0.15, 0, 0], [1, 0, 0]),
    ]
    kinds = ["cuboid", "cylinder", "barrel"]
    for i in range(n_objects):
        kind = kinds[i % 3]
        x, y = rng.uniform(0.5, 2.1), rng.uniform(1.1, 2.1)
        if kind == "cuboid":
            size = rng.uniform([0.15, 0.15, 0.2], [0.45, 0.45, 0.7])
            shapes.append(ShapeSpec("cuboid", size, _yaw(rng.uniform(0, np.pi)), [x, y, f + size[2] / 2]))
        elif kind == "cylinder":
            r, h = rng.uniform(0.08, 0.2), rng.uniform(0.3, 0.9)
            shapes.append(ShapeSpec("cylinder", (r, h), np.eye(3), [x, y, f + h / 2]))
        else:
            r = rng.uniform(0.15, 0.3)
            h = rng.uniform(1.0, 1.6) * r
            shapes.append(ShapeSpec("barrel", (r, h), np.eye(3), [x, y, f + h / 2]))
    return Scene(shapes)


def room_volume(scene: Scene, voxel_size: float = 0.02) -> TsdfVolume:
    dims = tuple(int(round(e / voxel_size)) for e in ROOM_EXTENT)
    return scene_volume(scene, dims, voxel_size)


def room_camera(offset=(0.0, 0.0, 0.0), target=(1.3, 1.7, 0.35)) -> np.ndarray:
    eye = np.array([1.28, 0.35, 1.0]) + np.asarray(offset)
    return look_at(eye, target)


def perturb(pose_matrix, translation: float, angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Apply a random translation of fixed length and rotation of fixed angle."""
    d = rng.normal(size=3)
    d *= translation / np.linalg.norm(d)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    delta = np.eye(4)
    delta[:3, :3] = Rotation.from_rotvec(np.deg2rad(angle_deg) * axis).as_matrix()
    out = np.asarray(pose_matrix).copy()
    out[:3, :3] = delta[:3, :3] @ out[:3, :3]
    out[:3, 3] += d
    return out


def camera_path(n_frames: int = 30, dt: float = 1.0 / 30) -> list[Pose]:
    """Smooth sideways sweep of the room camera."""
    poses = []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        offset = (0.3 * (s - 0.5), 0.1 * np.sin(np.pi * s), 0.05 * np.cos(np.pi * s))
        target = (1.3 + 0.2 * (s - 0.5), 1.7, 0.35)
        poses.append(Pose.from_matrix(room_camera(offset, target), i * dt))
    return poses


def label_blocks(scene: Scene, vol: TsdfVolume, shape_index: int = 0, purity: float = 0.5) -> np.ndarray:
    """Per-block flags (table order): True where at least ``purity`` of the
    block's near-surface voxels lie closest to ``scene.shapes[shape_index]``."""
    nx, ny, nz = vol.block_grid
    e = BLOCK_EDGE
    c = vol.voxel_centers()[: nx * e, : ny * e, : nz * e]
    c = c.reshape(nx, e, ny, e, nz, e, 3).transpose(4, 2, 0, 5, 3, 1, 6).reshape(-1, e ** 3, 3)
    total = scene.sdf(c)
    own = sdf_eval(scene.shapes[shape_index], c)
    near = np.abs(total) < vol.voxel_size
    mine = near & (own <= total + 1e-9)
    n_near = near.sum(axis=1)
    return (n_near > 0) & (mine.sum(axis=1) >= purity * np.maximum(n_near, 1))
