import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsdfcodec import volume
from tsdfcodec.errors import FormatError
from tsdfcodec.volume import BLOCK_EDGE, D_MAX, D_MIN, TsdfVolume


def linear_volume(dims=(20, 18, 17), a=(0.01, -0.02, 0.005), b=0.01, vs=0.02, origin=(0.1, -0.2, 0.3)):
    vol = TsdfVolume.empty(dims, vs, origin)
    c = vol.voxel_centers()
    vol.values = (c @ np.array(a) + b).astype(np.float32)
    return vol


def test_normalize_endpoints():
    assert volume.normalize(D_MIN) == 0.0
    assert volume.normalize(D_MAX) == 1.0
    assert volume.normalize(0.0) == pytest.approx(0.04 / 0.14)


@given(arrays(np.float64, 10, elements=st.floats(-1, 1)))
def test_normalize_roundtrip(x):
    np.testing.assert_allclose(volume.denormalize(volume.normalize(x)), x, atol=1e-12)


def test_empty_volume_is_unobserved_free_space():
    vol = TsdfVolume.empty((4, 5, 6), 0.01)
    assert np.all(vol.values == np.float32(D_MAX))
    assert np.all(vol.weights == 0)


def test_rejects_bad_truncation_and_shape():
    with pytest.raises(ValueError):
        TsdfVolume(np.zeros((2, 2, 2)), 0.01, d_min=0.1, d_max=0.2)
    with pytest.raises(ValueError):
        TsdfVolume(np.zeros((2, 2)), 0.01)
    with pytest.raises(ValueError):
        TsdfVolume(np.zeros((2, 2, 2)), 0.0)


def test_block_is_x_fastest():
    vol = TsdfVolume.empty((32, 16, 16), 0.02)
    i, j, k = np.meshgrid(np.arange(32), np.arange(16), np.arange(16), indexing="ij")
    vol.values = volume.denormalize((i + 16 * j + 256 * k) / 8192.0).astype(np.float32)
    block = volume.extract_block(vol, (1, 0, 0))
    flat = np.round(block * 8192).astype(int)
    # block voxel (x, y, z) sits at x + 16 y + 256 z
    assert flat[0] == 16 and flat[1] == 17 and flat[16] == 32 and flat[256] == 16 + 256


def test_extract_blocks_matches_single_blocks(rng):
    vol = TsdfVolume(rng.uniform(D_MIN, D_MAX, (33, 48, 17)), 0.02)
    table = volume.extract_blocks(vol)
    idx = volume.block_indices(vol)
    assert table.shape == (len(idx), 4096) == (6, 4096)
    assert idx[0] == (0, 0, 0) and idx[1] == (1, 0, 0)
    for row, ix in zip(table, idx):
        np.testing.assert_array_equal(row, volume.extract_block(vol, ix))


def test_insert_extract_roundtrip_and_mask(rng):
    vol = TsdfVolume.empty((32, 32, 16), 0.02)
    blocks = rng.uniform(0, 1, (4, 4096))
    volume.insert_blocks(vol, blocks, mask=[True, False, True, False])
    out = volume.extract_blocks(vol)
    np.testing.assert_allclose(out[[0, 2]], blocks[[0, 2]], atol=1e-6)
    np.testing.assert_allclose(out[[1, 3]], 1.0, atol=1e-6)
    volume.insert_block(vol, (1, 0, 0), blocks[1])
    np.testing.assert_allclose(volume.extract_block(vol, (1, 0, 0)), blocks[1], atol=1e-6)


def test_invalid_block_index():
    vol = TsdfVolume.empty((16, 16, 16), 0.02)
    with pytest.raises(IndexError):
        volume.extract_block(vol, (1, 0, 0))
    with pytest.raises(IndexError):
        volume.insert_block(vol, (0, -1, 0), np.zeros(4096))


def test_trilinear_reproduces_linear_field():
    a, b = np.array([0.01, -0.02, 0.005]), 0.01
    vol = linear_volume(a=a, b=b)
    rng = np.random.default_rng(0)
    p = vol.origin + rng.uniform(0, 1, (200, 3)) * (np.array(vol.dims) - 1) * vol.voxel_size
    np.testing.assert_allclose(volume.sample_trilinear(vol, p), p @ a + b, atol=1e-6)


def test_trilinear_outside_is_nan():
    vol = linear_volume()
    outside = vol.origin + np.array([[-0.001, 0, 0], [0, 0, (vol.dims[2] - 1) * vol.voxel_size + 1e-3]])
    assert np.all(np.isnan(volume.sample_trilinear(vol, outside)))


def test_gradient_of_linear_field():
    a = np.array([0.3, -0.2, 0.1])
    vol = linear_volume(a=a, b=0.0)
    p = vol.origin + np.array([[0.1, 0.1, 0.1], [0.2, 0.15, 0.12]])
    np.testing.assert_allclose(volume.gradient(vol, p), np.tile(a, (2, 1)), atol=1e-4)


def test_gaussian_kernel():
    k = volume.gaussian_kernel()
    assert len(k) == 9
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k, k[::-1])
    assert np.argmax(k) == 4


def test_blur_keeps_constants_and_band(rng):
    vol = TsdfVolume(np.full((10, 10, 10), 0.03), 0.02)
    np.testing.assert_allclose(volume.gaussian_blur(vol).values, 0.03, atol=1e-7)
    noisy = TsdfVolume(rng.uniform(D_MIN, D_MAX, (12, 11, 10)), 0.02)
    out = volume.gaussian_blur(noisy)
    assert out.values.min() >= D_MIN and out.values.max() <= D_MAX
    assert out.values.std() < noisy.values.std()
    with pytest.raises(ValueError):
        volume.gaussian_blur(TsdfVolume(np.zeros((8, 10, 10)), 0.02))


def test_blur_matches_direct_convolution_at_interior(rng):
    vol = TsdfVolume(rng.uniform(-0.02, 0.05, (12, 12, 12)), 0.02)
    out = volume.gaussian_blur(vol)
    k = volume.gaussian_kernel()
    kernel = k[:, None, None] * k[None, :, None] * k[None, None, :]
    direct = np.sum(vol.values[2:11, 3:12, 1:10] * kernel)
    assert out.values[6, 7, 5] == pytest.approx(direct, abs=1e-6)


def test_file_roundtrip_is_byte_identical(rng, tmp_path):
    vol = TsdfVolume(rng.uniform(D_MIN, D_MAX, (5, 6, 7)), 0.015, (0.5, -1.0, 2.0))
    vol.weights = rng.uniform(0, 10, vol.dims).astype(np.float32)
    buf = volume.to_bytes(vol)
    back = volume.from_bytes(buf)
    assert volume.to_bytes(back) == buf
    np.testing.assert_array_equal(back.values, vol.values)
    np.testing.assert_array_equal(back.weights, vol.weights)
    volume.save(back, tmp_path / "v.tsdf")
    assert (tmp_path / "v.tsdf").read_bytes() == buf


def test_file_errors():
    buf = volume.to_bytes(TsdfVolume.empty((2, 2, 2), 0.01))
    with pytest.raises(FormatError):
        volume.from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        volume.from_bytes(buf[:-4])
    with pytest.raises(FormatError):
        volume.from_bytes(buf[:10])


def test_block_grid_ignores_partial_blocks():
    vol = TsdfVolume.empty((BLOCK_EDGE * 2 + 5, BLOCK_EDGE, BLOCK_EDGE - 1), 0.02)
    assert vol.block_grid == (2, 1, 0)
    assert vol.n_blocks == 0
