"""TUM RGB-D style sequences: depth frames, trajectories, fusion and harvesting."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial.transform import Rotation

from .errors import AssociationError, FormatError
from .shapes import PERMUTATIONS, reflect_block
from .volume import BLOCK_EDGE, TsdfVolume, normalize

log = logging.getLogger(__name__)

TUM_DEPTH_SCALE = 5000.0
DEPTH_RANGE = (0.3, 6.0)
W_MAX = 100.0


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def parse(cls, text: str) -> "Intrinsics":
        parts = [float(x) for x in text.replace(",", " ").split()]
        if len(parts) != 4:
            raise ValueError("intrinsics need four numbers: fx fy cx cy")
        return cls(*parts)


@dataclass
class DepthFrame:
    depth: np.ndarray           # (height, width) metres, 0 = invalid
    intrinsics: Intrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2-D image")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def backproject(self, stride: int = 1, depth_range=DEPTH_RANGE) -> np.ndarray:
        """Camera-frame points of valid pixels on a ``stride`` grid, ``(n, 3)``."""
        k = self.intrinsics
        v, u = np.mgrid[0:self.height:stride, 0:self.width:stride]
        z = self.depth[v, u]
        ok = (z >= depth_range[0]) & (z <= depth_range[1])
        u, v, z = u[ok], v[ok], z[ok]
        return np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world transform; quaternion in TUM order ``(qx, qy, qz, qw)``."""

    translation: np.ndarray
    quaternion: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1) > 1e-6:
            raise ValueError("quaternion must have unit norm")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternion).as_matrix()

    def matrix(self) -> np.ndarray:
        t = np.eye(4)
        t[:3, :3] = self.rotation
        t[:3, 3] = self.translation
        return t

    @classmethod
    def from_matrix(cls, t, timestamp: float = 0.0) -> "Pose":
        t = np.asarray(t, dtype=np.float64)
        q = Rotation.from_matrix(t[:3, :3]).as_quat()
        return cls(t[:3, 3].copy(), q / np.linalg.norm(q), timestamp)

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> "Pose":
        return cls(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]), timestamp)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    translations: np.ndarray
    quaternions: np.ndarray
    failed: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        n = len(self.timestamps)
        if len(self.translations) != n or len(self.quaternions) != n:
            raise ValueError("trajectory arrays differ in length")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        if self.failed is not None:
            self.failed = np.asarray(self.failed, dtype=bool).reshape(n)

    @classmethod
    def from_poses(cls, poses, failed=None) -> "Trajectory":
        poses = list(poses)
        return cls(
            [p.timestamp for p in poses],
            [p.translation for p in poses] or np.zeros((0, 3)),
            [p.quaternion for p in poses] or np.zeros((0, 4)),
            failed,
        )

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i) -> Pose:
        return Pose(self.translations[i], self.quaternions[i], float(self.timestamps[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def parse_trajectory(path) -> Trajectory:
    """Read ``timestamp tx ty tz qx qy qz qw`` rows; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric field") from exc
        if len(vals) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(vals)}")
        q = np.array(vals[4:])
        norm = np.linalg.norm(q)
        if not norm > 0:
            raise FormatError(f"{path}:{lineno}: zero quaternion")
        if rows and vals[0] <= rows[-1][0]:
            raise FormatError(f"{path}:{lineno}: timestamps not strictly increasing")
        rows.append([vals[0], *vals[1:4], *(q / norm)])
    arr = np.array(rows, dtype=np.float64).reshape(-1, 8)
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:])


def format_trajectory(traj: Trajectory) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, p, q in zip(traj.timestamps, traj.translations, traj.quaternions):
        lines.append(" ".join([f"{t:.6f}"] + [f"{x:.9f}" for x in (*p, *q)]))
    return "\n".join(lines) + "\n"


def write_trajectory(traj: Trajectory, path) -> None:
    Path(path).write_text(format_trajectory(traj))


def associate_index(traj: Trajectory, t: float, max_dt: float) -> int | None:
    """Index of the pose nearest to ``t`` (ties go to the earlier pose), or None."""
    if len(traj) == 0:
        raise ValueError("cannot associate against an empty trajectory")
    ts = traj.timestamps
    j = int(np.searchsorted(ts, t))
    candidates = [i for i in (j - 1, j) if 0 <= i < len(ts)]
    best = min(candidates, key=lambda i: (abs(ts[i] - t), i))
    return best if abs(ts[best] - t) <= max_dt else None


def associate(traj: Trajectory, t: float, max_dt: float = 0.02) -> Pose:
    i = associate_index(traj, t, max_dt)
    if i is None:
        raise AssociationError(f"no pose within {max_dt}s of t={t}")
    return traj[i]


def load_depth_frame(path, intrinsics: Intrinsics, depth_scale: float = TUM_DEPTH_SCALE,
                     timestamp: float = 0.0) -> DepthFrame:
    """16-bit single-channel depth image to metres (``raw / depth_scale``)."""
    if depth_scale <= 0:
        raise ValueError("depth_scale must be positive")
    try:
        with Image.open(path) as img:
            mode = img.mode
            raw = np.array(img)
    except (OSError, UnidentifiedImageError) as exc:
        raise FormatError(f"cannot read depth image {path}: {exc}") from exc
    if mode not in ("I;16", "I;16B", "I;16L", "I") or raw.ndim != 2:
        raise FormatError(f"{path}: expected a 16-bit single-channel image, got mode {mode}")
    if raw.size and (raw.min() < 0 or raw.max() > 65535):
        raise FormatError(f"{path}: values outside the 16-bit range")
    return DepthFrame(raw.astype(np.float64) / depth_scale, intrinsics, timestamp)


def save_depth_png(depth_m, path, depth_scale: float = TUM_DEPTH_SCALE) -> None:
    raw = np.clip(np.round(np.asarray(depth_m) * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_tum_list(path) -> list[tuple[float, str]]:
    """``timestamp filename`` index files such as ``depth.txt``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise FormatError(f"{path}:{lineno}: expected 'timestamp filename'")
        try:
            out.append((float(parts[0]), parts[1]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad timestamp") from exc
    return out


def iter_sequence(seq_dir, intrinsics: Intrinsics, depth_scale: float = TUM_DEPTH_SCALE,
                  step: int = 1, limit: int | None = None):
    """Yield depth frames of a TUM sequence directory in timestamp order."""
    seq_dir = Path(seq_dir)
    entries = read_tum_list(seq_dir / "depth.txt")[::step]
    if limit is not None:
        entries = entries[:limit]
    for t, name in entries:
        yield load_depth_frame(seq_dir / name, intrinsics, depth_scale, t)


def fuse_frame(vol: TsdfVolume, frame: DepthFrame, pose: Pose, w_max: float = W_MAX,
               depth_range=DEPTH_RANGE, chunk: int = 1 << 20) -> None:
    """Integrate one depth frame by projective truncated distance and running average."""
    if vol.weights is None:
        vol.weights = np.zeros(vol.dims, dtype=np.float32)
    k = frame.intrinsics
    r = pose.rotation
    t = pose.translation
    vals = vol.values.reshape(-1)
    wts = vol.weights.reshape(-1)
    nx, ny, nz = vol.dims
    flat = np.arange(vals.size)
    for s in range(0, vals.size, chunk):
        idx = flat[s:s + chunk]
        # C-order flat index over (x, y, z)
        ijk = np.stack(np.unravel_index(idx, (nx, ny, nz)), axis=-1)
        pw = vol.origin + vol.voxel_size * ijk
        pc = (pw - t) @ r  # R^T (p - t)
        z = pc[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = np.rint(k.fx * pc[:, 0] / zs + k.cx).astype(np.int64)
        v = np.rint(k.fy * pc[:, 1] / zs + k.cy).astype(np.int64)
        ok = front & (u >= 0) & (u < frame.width) & (v >= 0) & (v < frame.height)
        d = np.zeros_like(z)
        d[ok] = frame.depth[v[ok], u[ok]]
        ok &= (d >= depth_range[0]) & (d <= depth_range[1])
        sdf = d - z
        ok &= sdf >= vol.d_min
        if not np.any(ok):
            continue
        sel = idx[ok]
        obs = np.minimum(sdf[ok], vol.d_max)
        w_old = wts[sel].astype(np.float64)
        vals[sel] = ((vals[sel] * w_old + obs) / (w_old + 1.0)).astype(np.float32)
        wts[sel] = np.minimum(w_old + 1.0, w_max).astype(np.float32)


def harvest_windows(vol: TsdfVolume, stride: int = 8) -> np.ndarray:
    """All normalized 16^3 windows every ``stride`` voxels, each followed by
    its five other axis-order variants (no filtering)."""
    starts = [range(0, d - BLOCK_EDGE + 1, stride) for d in vol.dims]
    out = []
    for z in starts[2]:
        for y in starts[1]:
            for x in starts[0]:
                sub = vol.values[x:x + BLOCK_EDGE, y:y + BLOCK_EDGE, z:z + BLOCK_EDGE]
                block = normalize(sub, vol.d_min, vol.d_max).ravel(order="F")
                out.extend(reflect_block(block, pid) for pid in range(len(PERMUTATIONS)))
    return np.asarray(out, dtype=np.float32).reshape(-1, BLOCK_EDGE ** 3)


def harvest_subvolumes(vol: TsdfVolume, stride: int = 8, emptiness_threshold: float = 0.85,
                       empty_fraction: float = 0.0) -> np.ndarray:
    """Windows from :func:`harvest_windows` with mostly-free-space ones dropped.

    Windows with mean above ``emptiness_threshold`` are discarded except for
    enough of them (in scan order) to make up ``empty_fraction`` of the output.
    """
    windows = harvest_windows(vol, stride)
    is_empty = windows.mean(axis=1) > emptiness_threshold
    kept = windows[~is_empty]
    empties = windows[is_empty]
    if empty_fraction >= 1:
        n_empty = len(empties)
    elif empty_fraction > 0:
        n_empty = int(np.floor(empty_fraction * len(kept) / (1 - empty_fraction)))
    else:
        n_empty = 0
    return np.concatenate([kept, empties[:n_empty]])
