import numpy as np
import pytest

from tsdfcodec import synth
from tsdfcodec.ingest import Intrinsics, Pose
from tsdfcodec.shapes import ShapeSpec
from tsdfcodec.volume import D_MAX, D_MIN


def test_render_plane_depth_is_exact():
    scene = synth.Scene([ShapeSpec("plane", (), np.eye(3), (0, 0, 0))])
    cam = synth.look_at([0, 0, 2.0], [0, 0, 0], up=(0, 1, 0))
    depth = synth.render_depth(scene.sdf, cam, Intrinsics(50, 50, 15.5, 11.5), (32, 24))
    np.testing.assert_allclose(depth, 2.0, atol=1e-9)


def test_render_misses_are_zero():
    scene = synth.Scene([ShapeSpec("cuboid", (0.2, 0.2, 0.2), np.eye(3), (0, 0, 0))])
    cam = synth.look_at([0, 0, 2.0], [0, 0, 0], up=(0, 1, 0))
    depth = synth.render_depth(scene.sdf, cam, Intrinsics(50, 50, 15.5, 11.5), (32, 24), max_depth=4.0)
    assert depth[0, 0] == 0
    assert depth[12, 16] == pytest.approx(1.9, abs=1e-6)


def test_look_at_axes():
    t = synth.look_at([1, 0, 0], [1, 1, 0])
    np.testing.assert_allclose(t[:3, 2], [0, 1, 0])  # forward
    np.testing.assert_allclose(t[:3, 1], [0, 0, -1])  # image y points down
    assert np.linalg.det(t[:3, :3]) == pytest.approx(1)


def test_noise_is_seeded():
    scene = synth.cluttered_room(0)
    pose = Pose.from_matrix(synth.room_camera())
    a = synth.render_frame(scene.sdf, pose, noise_sigma=0.01, rng=np.random.default_rng(3))
    b = synth.render_frame(scene.sdf, pose, noise_sigma=0.01, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a.depth, b.depth)


def test_room_volume_and_labels(room_scene, room_vol):
    assert room_vol.dims == (128, 128, 80)
    assert room_vol.values.min() >= D_MIN and room_vol.values.max() <= D_MAX
    labels = synth.label_blocks(room_scene, room_vol, purity=0.9)
    # floor blocks sit in the bottom block layer
    layer = np.repeat(np.arange(5), 64)
    assert labels.any() and np.all(layer[labels] == 0)


def test_perturb_has_requested_size():
    t = synth.room_camera()
    p = synth.perturb(t, 0.02, 2.0, np.random.default_rng(0))
    assert np.linalg.norm(p[:3, 3] - t[:3, 3]) == pytest.approx(0.02)
    r = p[:3, :3] @ t[:3, :3].T
    assert np.degrees(np.arccos((np.trace(r) - 1) / 2)) == pytest.approx(2.0)


def test_camera_path_timestamps():
    path = synth.camera_path(5, dt=0.5)
    assert [p.timestamp for p in path] == [0, 0.5, 1.0, 1.5, 2.0]
