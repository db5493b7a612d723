import numpy as np
import pytest

from tsdfcodec import autoencoder as ae
from tsdfcodec import container, volume
from tsdfcodec.container import CompressedMap
from tsdfcodec.errors import ConfigError, FormatError
from tsdfcodec.volume import D_MAX, TsdfVolume


@pytest.fixture(scope="module")
def vol(small_dataset):
    """A 4x2x2-block volume tiled with dataset blocks, some empty."""
    v = TsdfVolume.empty((64, 32, 32), 0.02, (0.1, 0.2, 0.3))
    blocks = small_dataset.blocks[:16].astype(np.float64).copy()
    blocks[[3, 7]] = 1.0
    volume.insert_blocks(v, blocks)
    v.weights[...] = 1
    return v


def test_compress_flags_empties_and_reports_ratio(vol, pca32):
    cmap = container.compress(vol, pca32)
    assert cmap.n_blocks == 16 and cmap.empty[[3, 7]].all()
    means = volume.extract_blocks(vol).mean(axis=1)
    np.testing.assert_array_equal(cmap.empty, means > 0.85)
    sizes = cmap.sizes()
    assert sizes["payload_ratio"] == 128
    assert sizes["raw_block_bytes"] == 128 * sizes["payload_bytes"]
    assert sizes["file_bytes"] == sizes["payload_bytes"] + sizes["header_bytes"]


def test_ratio_for_longer_codes(vol, small_dataset):
    from tsdfcodec import pca
    codec = pca.fit(small_dataset.blocks, 127)
    assert container.compress(vol, codec).sizes()["payload_ratio"] == 32


def test_decompress_is_transparent(vol, pca32):
    cmap = container.compress(vol, pca32)
    out = container.decompress(cmap, pca32)
    blocks = volume.extract_blocks(vol)
    got = volume.extract_blocks(out)
    coded = ~cmap.empty
    expected = pca32.decode(cmap.codes.astype(np.float64))
    np.testing.assert_allclose(got[coded], expected, atol=1e-6)
    assert np.all(out.values.reshape(-1)[np.isclose(out.weights.reshape(-1), 0)] == np.float32(D_MAX))
    np.testing.assert_allclose(got[~coded], 1.0, atol=1e-6)
    assert out.same_geometry(vol)
    # reconstruction error is the codec's own
    direct = pca32.decode(pca32.encode(blocks[coded]))
    np.testing.assert_allclose(got[coded], direct, atol=1e-5)


def test_all_empty_volume(pca32):
    v = TsdfVolume.empty((32, 32, 16), 0.02)
    cmap = container.compress(v, pca32)
    assert cmap.empty.all() and cmap.n_coded == 0
    assert cmap.sizes()["payload_bytes"] == 0
    out = container.decompress(cmap, pca32)
    assert np.all(out.values == np.float32(D_MAX))


def test_file_roundtrip_byte_identical(vol, pca32, tmp_path):
    cmap = container.compress(vol, pca32)
    buf = cmap.to_bytes()
    back = CompressedMap.from_bytes(buf)
    assert back.to_bytes() == buf
    container.save(back, tmp_path / "m.tmap")
    assert container.load(tmp_path / "m.tmap").to_bytes() == buf
    geo = back.geometry_volume()
    assert geo.same_geometry(vol)


def test_compress_decompress_fixpoint(pca32, small_dataset):
    # blocks already in the codec's range and inside [0, 1], so the clamp is inactive
    x = 0.5 + 0.3 * (small_dataset.blocks[:16].astype(np.float64) - 0.5)
    inside = pca32.decode(pca32.encode(x))
    assert 0 < inside.min() and inside.max() < 1
    v = TsdfVolume.empty((64, 32, 32), 0.02)
    volume.insert_blocks(v, inside)
    first = container.compress(v, pca32)
    second = container.compress(container.decompress(first, pca32), pca32)
    np.testing.assert_array_equal(second.empty, first.empty)
    np.testing.assert_allclose(second.codes, first.codes, atol=1e-5)


def test_clamped_blocks_are_not_a_fixpoint(vol, pca32):
    first = container.compress(vol, pca32)
    second = container.compress(container.decompress(first, pca32), pca32)
    assert np.abs(second.codes - first.codes).max() > 1e-3


def test_codec_resolution(vol, pca32, pca64, tmp_path):
    cmap = container.compress(vol, pca32)
    with pytest.raises(FormatError):
        container.resolve_codec(cmap)
    with pytest.raises(FormatError):
        container.resolve_codec(cmap, [pca64])
    container.codec_bytes(pca32)
    (tmp_path / "c.pcac").write_bytes(pca32.to_bytes())
    found = container.resolve_codec(cmap, [pca64, tmp_path / "c.pcac"])
    assert found.to_bytes() == pca32.to_bytes()
    inline = container.compress(vol, pca32, inline=True)
    standalone = CompressedMap.from_bytes(inline.to_bytes())
    np.testing.assert_allclose(container.decompress(standalone).values, container.decompress(cmap, pca32).values, atol=1e-6)
    with pytest.raises(FormatError):
        container.decompress(cmap, pca64)


def test_truncation_mismatch(vol, pca32):
    with pytest.raises(ConfigError):
        container.compress(vol, pca32, truncation=(-0.05, 0.1))


def test_threaded_matches_serial(pca32, small_dataset, monkeypatch):
    monkeypatch.setattr(container, "CHUNK", 5)
    v = TsdfVolume.empty((64, 32, 32), 0.02)
    volume.insert_blocks(v, small_dataset.blocks[:16])
    a = container.compress(v, pca32, workers=1)
    b = container.compress(v, pca32, workers=3)
    assert a.to_bytes() == b.to_bytes()
    np.testing.assert_array_equal(container.decompress(a, pca32, workers=3).values,
                                  container.decompress(a, pca32).values)


def test_autoencoder_codec_in_container(vol):
    net = ae.init([4096, 8, 32, 8, 4096], seed=0).astype(np.float32)
    cmap = container.compress(vol, net)
    assert cmap.codec_id == "ae32"
    out = container.decompress(CompressedMap.from_bytes(cmap.to_bytes()), container.load_codec_bytes(net.to_bytes()))
    assert out.same_geometry(vol)


def test_format_errors(vol, pca32):
    buf = container.compress(vol, pca32).to_bytes()
    with pytest.raises(FormatError):
        CompressedMap.from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        CompressedMap.from_bytes(buf[:-4])
    with pytest.raises(FormatError):
        container.load_codec_bytes(b"ZZZZ")


def test_evaluate_recon_oracles(vol, pca32, small_dataset):
    rep = container.evaluate_recon(vol, vol)
    assert rep.mean == 0 and len(rep.block_mse) == 14
    shifted = vol.copy()
    blocks = volume.extract_blocks(vol)
    volume.insert_blocks(shifted, blocks + 0.01)
    assert container.evaluate_recon(vol, shifted).mean == pytest.approx(1e-4, rel=1e-3)
    records = dict(line.split("=", 1) for line in rep.records())
    assert records["n_blocks"] == "14"
    with pytest.raises(ValueError):
        container.evaluate_recon(vol, TsdfVolume.empty((16, 16, 16), 0.02))


def test_evaluate_recon_orders_pca_sizes(vol, small_dataset):
    from tsdfcodec import pca
    errs = []
    for k in (31, 63, 127):
        codec = pca.fit(small_dataset.blocks, k)
        errs.append(container.evaluate_recon(vol, container.decompress(container.compress(vol, codec), codec)).mean)
    assert errs[0] >= errs[1] >= errs[2]
