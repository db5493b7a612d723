import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from tsdfcodec import shapes
from tsdfcodec.errors import FormatError
from tsdfcodec.shapes import DatasetSpec, ShapeSpec, generate_dataset, sdf_eval

points = st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3).map(np.array)


def test_cuboid_distances():
    box = ShapeSpec("cuboid", (0.4, 0.6, 0.8))
    p = np.array([[0, 0, 0], [0.2, 0, 0], [0.5, 0, 0], [0.5, 0.4, 0]])
    np.testing.assert_allclose(sdf_eval(box, p), [-0.2, 0.0, 0.3, np.hypot(0.3, 0.1)])


def test_cylinder_and_plane_distances():
    cyl = ShapeSpec("cylinder", (0.2, 1.0))
    np.testing.assert_allclose(sdf_eval(cyl, np.array([[0.5, 0, 0], [0, 0, 0.7], [0, 0, 0]])), [0.3, 0.2, -0.2])
    plane = ShapeSpec("plane")
    np.testing.assert_allclose(sdf_eval(plane, np.array([[3, -2, 0.25], [0, 0, -0.1]])), [0.25, -0.1])


def test_concave_corner_outside_distance():
    corner = ShapeSpec("concave_corner")
    # solid is the union of x<0, y<0, z<0: outside, the nearest wall is the smallest coordinate
    assert sdf_eval(corner, np.array([0.3, 0.1, 0.2])) == pytest.approx(0.1)
    assert sdf_eval(corner, np.array([-0.1, 0.5, 0.5])) < 0


def test_posed_shape_uses_world_transform():
    r = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    box = ShapeSpec("cuboid", (1.0, 0.2, 0.2), r, (1.0, 2.0, 3.0))
    # long axis now runs along world y
    assert sdf_eval(box, np.array([1.0, 2.45, 3.0])) < 0
    assert sdf_eval(box, np.array([1.45, 2.0, 3.0])) > 0


@pytest.mark.parametrize("category", shapes.EXACT_CATEGORIES)
@given(p=points, q=points)
def test_exact_distances_are_1_lipschitz(category, p, q):
    params = {"cuboid": (0.3, 0.5, 0.7), "cylinder": (0.3, 0.6)}.get(category, ())
    s = ShapeSpec(category, params)
    assert abs(sdf_eval(s, p) - sdf_eval(s, q)) <= np.linalg.norm(p - q) + 1e-9


@given(p=points)
def test_barrel_is_lower_bound_inside_sphere_and_slab(p):
    barrel = ShapeSpec("barrel", (0.5, 0.6))
    d = sdf_eval(barrel, p)
    sphere = np.linalg.norm(p) - 0.5
    slab = abs(p[2]) - 0.3
    assert d == pytest.approx(max(sphere, slab))


def test_invalid_shape_spec():
    with pytest.raises(ValueError):
        ShapeSpec("torus")
    with pytest.raises(ValueError):
        ShapeSpec("cuboid", (0.1, -0.1, 0.1))
    with pytest.raises(ValueError):
        ShapeSpec("plane", (), np.diag([1.0, 1.0, -1.0]))


def test_sample_shape_block_plane_profile():
    block = shapes.sample_shape_block(ShapeSpec("plane"), (0, 0, -0.1), 0.02)
    assert block.shape == (4096,)
    cube = block.reshape(16, 16, 16, order="F")
    # plane at local z index 5: distance (k - 5) * 0.02, truncated and normalized
    expected = np.clip((np.arange(16) - 5) * 0.02, -0.04, 0.1)
    np.testing.assert_allclose(cube[3, 7, :], (expected + 0.04) / 0.14, atol=1e-12)


@given(st.integers(0, 5))
def test_reflect_inverse_roundtrip(pid):
    b = np.arange(4096, dtype=float)
    out = shapes.reflect_block(shapes.reflect_block(b, pid), shapes.inverse_permutation_id(pid))
    np.testing.assert_array_equal(out, b)


def test_reflect_maps_z_plane_to_other_axes():
    block = shapes.sample_shape_block(ShapeSpec("plane"), (0, 0, -0.1), 0.02)
    np.testing.assert_array_equal(shapes.reflect_block(block, 0), block)
    for pid in range(6):
        cube = shapes.reflect_block(block, pid).reshape(16, 16, 16, order="F")
        axis = shapes.PERMUTATIONS[pid].index(2)
        # values vary only along the axis that received the old z
        for other in {0, 1, 2} - {axis}:
            assert np.ptp(cube, axis=other).max() == 0
    with pytest.raises(IndexError):
        shapes.reflect_block(block, 6)


def test_dataset_is_deterministic_and_labelled():
    spec = DatasetSpec(150, rng_seed=5, empty_fraction=0.1)
    a, b = generate_dataset(spec), generate_dataset(spec)
    np.testing.assert_array_equal(a.blocks, b.blocks)
    assert a.blocks.dtype == np.float32 and a.blocks.shape == (150, 4096)
    assert a.empty.sum() == 15
    means = a.blocks.mean(axis=1)
    assert np.all(means[a.empty] > 0.85) and np.all(means[~a.empty] <= 0.85)
    assert a.blocks.min() >= 0 and a.blocks.max() <= 1
    assert set(a.categories) <= set(shapes.CATEGORIES)
    c = generate_dataset(DatasetSpec(150, rng_seed=6, empty_fraction=0.1))
    assert not np.array_equal(a.blocks, c.blocks)


def test_dataset_categories_roughly_uniform():
    ds = generate_dataset(DatasetSpec(500, rng_seed=2, empty_fraction=0.0))
    counts = np.array([np.sum(ds.categories == c) for c in shapes.SHAPE_CATEGORIES])
    assert counts.min() > 60 and counts.max() < 140


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(0)
    with pytest.raises(ValueError):
        DatasetSpec(10, empty_fraction=1.5)
    with pytest.raises(ValueError):
        DatasetSpec(10, block_edge=8)


def test_dataset_file_roundtrip(small_dataset, tmp_path):
    buf = shapes.dataset_to_bytes(small_dataset.blocks[:20])
    back = shapes.dataset_from_bytes(buf)
    np.testing.assert_array_equal(back, small_dataset.blocks[:20])
    assert shapes.dataset_to_bytes(back) == buf
    shapes.save_dataset(back, tmp_path / "d.tblk")
    np.testing.assert_array_equal(shapes.load_dataset(tmp_path / "d.tblk"), back)
    with pytest.raises(FormatError):
        shapes.dataset_from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(FormatError):
        shapes.dataset_from_bytes(buf[:-1])
