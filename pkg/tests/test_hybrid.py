import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsdfcodec import autoencoder as ae
from tsdfcodec import hybrid
from tsdfcodec.errors import CodecError, FormatError
from tsdfcodec.hybrid import ParallelCodec, SequentialCodec


class OracleResidual:
    """Residual stage that remembers every residual it encodes."""

    code_length = 64

    def __init__(self):
        self.store = []

    def encode(self, residuals):
        r = np.atleast_2d(residuals)
        codes = np.zeros((len(r), 64))
        for i, row in enumerate(r):
            codes[i, 0] = len(self.store)
            self.store.append(row.copy())
        return codes if np.ndim(residuals) == 2 else codes[0]

    def decode(self, codes):
        c = np.atleast_2d(codes)
        out = np.stack([self.store[int(i)] for i in c[:, 0]])
        return out if np.ndim(codes) == 2 else out[0]


@pytest.fixture(scope="module")
def small_net():
    return ae.init([4096, 8, 64, 8, 4096], seed=0)


@given(st.floats(0.0, 1.0), st.floats(0.1, 5.0))
def test_golden_section_on_quadratic(x0, scale):
    x, fx = hybrid.golden_section(lambda w: scale * (w - x0) ** 2, tol=1e-6)
    assert abs(x - x0) < 1e-5


def test_golden_section_endpoints_and_ties():
    assert hybrid.golden_section(lambda w: w)[0] == 0.0
    assert hybrid.golden_section(lambda w: -w)[0] == 1.0
    assert hybrid.golden_section(lambda w: 0.0, prefer="hi")[0] == 1.0
    assert hybrid.golden_section(lambda w: 0.0, prefer="lo")[0] == 0.0


def test_golden_section_batched():
    targets = np.array([0.1, 0.5, 0.9, 1.5])
    x, _ = hybrid.golden_section(lambda w: (w - targets) ** 2, tol=1e-7, batch=4)
    np.testing.assert_allclose(x, [0.1, 0.5, 0.9, 1.0], atol=1e-6)


def test_closed_form_weight_oracle(rng):
    p, a = rng.uniform(0, 1, (2, 50))
    x = 0.3 * p + 0.7 * a
    assert hybrid.closed_form_weight(p, a, x) == pytest.approx(0.3)
    assert hybrid.closed_form_weight(p, a, 2 * p - a) == 1.0
    assert hybrid.closed_form_weight(p, p, x) == 1.0  # identical parts: any w, keep PCA


def test_split_must_total_128(pca32, pca64, small_net):
    with pytest.raises(ValueError):
        ParallelCodec(pca32, small_net, 0.5)
    with pytest.raises(ValueError):
        ParallelCodec(pca64, small_net, 1.5)


def test_parallel_endpoints_and_weights(pca64, small_net, small_dataset):
    codec = ParallelCodec(pca64, small_net, 1.0)
    x = small_dataset.blocks[:20]
    codes = codec.encode(x)
    assert codes.shape == (20, 128) and codec.codec_id == "parallel64+64"
    np.testing.assert_allclose(codec.decode(codes, 1.0), pca64.decode(pca64.encode(x)))
    np.testing.assert_allclose(codec.decode(codes, 0.0), small_net.decode(small_net.encode(x)), atol=1e-12)
    per_block = codec.decode(codes, np.linspace(0, 1, 20))
    assert per_block.shape == (20, 4096)
    with pytest.raises(ValueError):
        codec.decode(codes, -0.1)
    with pytest.raises(CodecError):
        codec.decode(codes[:, :100])


def test_optimised_weight_dominates_endpoints(pca64, small_net, small_dataset):
    codec = ParallelCodec(pca64, small_net, 1.0)
    x = small_dataset.blocks[:100].astype(np.float64)
    w, mse = hybrid.optimize_weight(codec, x)
    codes = codec.encode(x)
    ends = [np.mean((codec.decode(codes, e) - x) ** 2) for e in (0.0, 1.0)]
    assert np.mean((codec.decode(codes, w) - x) ** 2) <= min(ends) + 1e-9
    ws, _ = hybrid.optimize_weight(codec, x, per_block=True)
    assert ws.shape == (100,)
    assert np.mean((codec.decode(codes, ws) - x) ** 2) <= np.mean((codec.decode(codes, w) - x) ** 2) + 1e-9


def test_golden_section_agrees_with_closed_form(pca64, small_net, small_dataset):
    codec = ParallelCodec(pca64, small_net, 1.0)
    x = small_dataset.blocks[:100].astype(np.float64)
    p, a = codec.decode_parts(codec.encode(x))
    # mix an interior optimum so the comparison is not decided by a clamp
    a = 0.5 * (a + x)
    w_star = hybrid.closed_form_weight(p, a, x)
    w_gs, _ = hybrid.golden_section(lambda w: hybrid._mix_mse(w, p, a, x), tol=1e-4)
    assert abs(w_gs - w_star) < 1e-3


def test_sequential_with_oracle_stage_is_exact(pca64, small_dataset):
    codec = SequentialCodec(pca64, OracleResidual(), 1.0)
    x = small_dataset.blocks[:30].astype(np.float64)
    out = codec.decode(codec.encode(x))
    assert np.abs(out - x).max() <= 1e-6


def test_sequential_search_never_worse_than_pca(pca64, small_dataset):
    net = ae.init([4096, 8, 64, 8, 4096], seed=4, output_activation="tanh")
    codec = SequentialCodec(pca64, net, 1.0)
    x = small_dataset.blocks[:100].astype(np.float64)
    w2, mse = hybrid.optimize_second_weight(codec, x)
    pca_only = np.mean((pca64.decode(pca64.encode(x)) - x) ** 2)
    assert mse <= pca_only + 1e-9
    assert np.mean((codec.decode(codec.encode(x), w2) - x) ** 2) == pytest.approx(mse)


def test_residual_summary_of_zero_mean_noise(rng):
    stats = hybrid.residual_summary(rng.normal(0, 0.01, (50, 4096)))
    assert abs(stats["mean"]) < 1e-3
    assert stats["rms"] == pytest.approx(0.01, rel=0.05)
    assert 0 <= stats["low_frequency_energy_fraction"] < 0.1


@pytest.mark.parametrize("mode", ["parallel", "sequential"])
def test_file_roundtrip(pca64, mode, tmp_path):
    if mode == "parallel":
        codec = ParallelCodec(pca64, ae.init([4096, 8, 64, 8, 4096], seed=0).astype(np.float32), 0.25)
    else:
        codec = SequentialCodec(pca64, ae.init([4096, 8, 64, 8, 4096], seed=0, output_activation="tanh")
                                .astype(np.float32), 0.75)
    buf = codec.to_bytes()
    back = hybrid.from_bytes(buf)
    assert type(back) is type(codec)
    assert back.to_bytes() == buf
    hybrid.save(back, tmp_path / "h.hybc")
    assert hybrid.load(tmp_path / "h.hybc").to_bytes() == buf
    with pytest.raises(FormatError):
        hybrid.from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        hybrid.from_bytes(buf + b"\0")
