"""Frame-to-model camera tracking against a TSDF, and absolute trajectory error.

Each depth frame is aligned by Gauss-Newton on the Huber-robustified sum of
interpolated distances at the transformed points.  Increments are twists
``(omega, v)`` applied on the left: ``T <- exp(xi) T``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EvaluationError, TrackingFailure
from .ingest import DEPTH_RANGE, DepthFrame, Pose, Trajectory, associate_index
from .volume import TsdfVolume, gradient, sample_trilinear

log = logging.getLogger(__name__)


def hat(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def se3_exp(xi) -> np.ndarray:
    """4x4 rigid transform of the twist ``xi = (omega, v)``."""
    xi = np.asarray(xi, dtype=np.float64)
    w, v = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    W = hat(w)
    W2 = W @ W
    if theta < 1e-8:
        a, b, c = 1.0, 0.5, 1.0 / 6.0
    else:
        a = np.sin(theta) / theta
        b = (1 - np.cos(theta)) / theta ** 2
        c = (theta - np.sin(theta)) / theta ** 3
    t = np.eye(4)
    t[:3, :3] = np.eye(3) + a * W + b * W2
    t[:3, 3] = (np.eye(3) + b * W + c * W2) @ v
    return t


def rotation_angle(r) -> float:
    """Angle in radians of a rotation matrix."""
    return float(Rotation.from_matrix(r).magnitude())


def huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


@dataclass
class TrackerConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    huber_delta: float = 0.02
    point_subsample_stride: int = 2
    min_points: int = 100
    max_halvings: int = 12
    depth_range: tuple = DEPTH_RANGE

    def __post_init__(self):
        if min(self.max_iterations, self.convergence_tol, self.huber_delta,
               self.point_subsample_stride, self.min_points) <= 0:
            raise ValueError("tracker settings must be positive")


@dataclass
class TrackingInfo:
    pose: Pose
    iterations: int = 0
    costs: list = field(default_factory=list)
    n_points: int = 0
    n_usable: int = 0


def _transform(t, pts):
    return pts @ t[:3, :3].T + t[:3, 3]


def _cost(vol, pts, t, delta):
    d = sample_trilinear(vol, _transform(t, pts))
    # points that leave the volume count as free space
    return float(np.sum(huber(np.where(np.isfinite(d), d, vol.d_max), delta)))


def track_frame_detailed(vol: TsdfVolume, frame: DepthFrame, init: Pose,
                         cfg: TrackerConfig | None = None) -> TrackingInfo:
    cfg = cfg or TrackerConfig()
    pts = frame.backproject(cfg.point_subsample_stride, cfg.depth_range)
    t = init.matrix()
    cost = _cost(vol, pts, t, cfg.huber_delta)
    info = TrackingInfo(init, costs=[cost], n_points=len(pts))
    for it in range(cfg.max_iterations):
        q = _transform(t, pts)
        d = sample_trilinear(vol, q)
        g = gradient(vol, q)
        usable = np.isfinite(d) & np.all(np.isfinite(g), axis=1) & (np.einsum("ij,ij->i", g, g) > 1e-12)
        info.n_usable = int(usable.sum())
        if info.n_usable < cfg.min_points:
            raise TrackingFailure(f"only {info.n_usable} usable points (need {cfg.min_points})")
        q, d, g = q[usable], d[usable], g[usable]
        jac = np.hstack([np.cross(q, g), g])
        a = np.abs(d)
        w = np.where(a <= cfg.huber_delta, 1.0, cfg.huber_delta / np.maximum(a, 1e-300))
        h = jac.T @ (jac * w[:, None])
        b = jac.T @ (w * d)
        h += np.eye(6) * (1e-9 * np.trace(h) / 6 + 1e-12)
        xi = -np.linalg.solve(h, b)

        step = 1.0
        for _ in range(cfg.max_halvings):
            cand = se3_exp(step * xi) @ t
            new_cost = _cost(vol, pts, cand, cfg.huber_delta)
            if new_cost <= cost:
                break
            step *= 0.5
        else:
            info.iterations = it + 1
            break
        t, cost = cand, new_cost
        info.costs.append(cost)
        info.iterations = it + 1
        if np.linalg.norm(step * xi) < cfg.convergence_tol:
            break
    info.pose = Pose.from_matrix(t, frame.timestamp)
    return info


def track_frame(vol: TsdfVolume, frame: DepthFrame, init: Pose, cfg: TrackerConfig | None = None) -> Pose:
    """Refine ``init`` so the frame's points sit on the model's zero level set.

    Raises :class:`TrackingFailure` when fewer than ``cfg.min_points`` points
    have a usable distance and gradient.
    """
    return track_frame_detailed(vol, frame, init, cfg).pose


def estimate_trajectory(vol: TsdfVolume, frames, init: Pose, cfg: TrackerConfig | None = None) -> Trajectory:
    """Chain frame-to-model tracking; failed frames hold the previous pose and are flagged."""
    poses, failed = [], []
    current = init
    for i, frame in enumerate(frames):
        try:
            current = track_frame(vol, frame, current, cfg)
            failed.append(False)
        except TrackingFailure as exc:
            log.warning("frame %d (t=%.6f): %s; holding previous pose", i, frame.timestamp, exc)
            current = Pose(current.translation, current.quaternion, frame.timestamp)
            failed.append(True)
        poses.append(Pose(current.translation, current.quaternion, frame.timestamp))
    return Trajectory.from_poses(poses, failed)


@dataclass
class AteResult:
    mean: float
    median: float
    per_pose: np.ndarray
    timestamps: np.ndarray

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.per_pose ** 2)))


def ate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> AteResult:
    """Translational error of each estimated pose against its nearest ground-truth pose.

    No alignment is applied; both trajectories must share a world frame.
    """
    if len(gt) == 0 or len(est) == 0:
        raise EvaluationError("empty trajectory")
    errs, ts = [], []
    for i in range(len(est)):
        j = associate_index(gt, est.timestamps[i], max_dt)
        if j is None:
            continue
        errs.append(np.linalg.norm(est.translations[i] - gt.translations[j]))
        ts.append(est.timestamps[i])
    if not errs:
        raise EvaluationError("no associable pose pairs")
    errs = np.asarray(errs)
    return AteResult(float(errs.mean()), float(np.median(errs)), errs, np.asarray(ts))
