import numpy as np
import pytest

from tetsurf import net, weights
from tetsurf import tetgrid as tg
from tetsurf.encoder import init_encoder


@pytest.fixture
def params():
    grid = tg.GridConfig.from_range(3, 2, 8)
    enc = init_encoder(grid, d=2, log2_table=16, seed=0)
    mlp = net.init_mlp(enc.feature_dim, hidden=(6, 6), seed=1)
    return enc, mlp


class TestWeightFile:
    def test_roundtrip(self, params, tmp_path):
        enc, mlp = params
        path = tmp_path / "w.tsdf"
        weights.save_weights(path, enc, mlp, sidecar={"note": "x"})
        enc2, mlp2, side = weights.load_weights(path)
        assert enc2.resolutions == enc.resolutions
        assert enc2.d == enc.d and enc2.dense == enc.dense
        # tables round-trip through float32 exactly once
        for a, b in zip(enc.tables, enc2.tables):
            assert np.array_equal(a.astype(np.float32).astype(np.float64), b)
        # MLP stays float64 exact
        for a, b in zip(mlp.weights + mlp.biases, mlp2.weights + mlp2.biases):
            assert np.array_equal(a, b)
        assert side["note"] == "x"
        assert side["resolutions"] == list(enc.resolutions)

    def test_second_roundtrip_is_exact(self, params, tmp_path):
        # after one f32 cast, further save/load cycles are lossless
        enc, mlp = params
        p1 = tmp_path / "a.tsdf"
        weights.save_weights(p1, enc, mlp)
        enc2, mlp2, _ = weights.load_weights(p1)
        p2 = tmp_path / "b.tsdf"
        weights.save_weights(p2, enc2, mlp2)
        enc3, _, _ = weights.load_weights(p2)
        for a, b in zip(enc2.tables, enc3.tables):
            assert np.array_equal(a, b)

    def test_deterministic_bytes(self, params, tmp_path):
        enc, mlp = params
        a = tmp_path / "a.tsdf"
        b = tmp_path / "b.tsdf"
        weights.save_weights(a, enc, mlp)
        weights.save_weights(b, enc, mlp)
        assert a.read_bytes() == b.read_bytes()

    def test_magic_check(self, tmp_path):
        path = tmp_path / "bad.tsdf"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(weights.WeightFormatError):
            weights.load_weights(path)

    def test_header_fields(self, params, tmp_path):
        enc, mlp = params
        path = tmp_path / "w.tsdf"
        meta = weights.save_weights(path, enc, mlp)
        raw = path.read_bytes()
        assert raw[:4] == b"TSDF"
        assert meta["mlp_shapes"][0] == [6, enc.feature_dim]
        assert meta["dense"] == [True, True, True]
