import numpy as np
import pytest

from pneumoseg import model as M
from pneumoseg.tensor import Tensor


def expected_shapes(s, width=1.0, n=1):
    sc = lambda c: max(1, int(round(c * width)))
    e = [sc(c) for c in M.ENCODER_CHANNELS]
    d = [sc(c) for c in M.DECODER_CHANNELS]
    shapes = {
        "conv1": (n, e[0], s // 2, s // 2),
        "maxpool": (n, e[0], s // 4, s // 4),
        "encoder1": (n, e[0], s // 4, s // 4),
        "encoder2": (n, e[1], s // 8, s // 8),
        "encoder3": (n, e[2], s // 16, s // 16),
        "encoder4": (n, e[3], s // 32, s // 32),
    }
    prev, skips = e[3], [e[2], e[1], e[0], e[0], 0]
    for k in range(5):
        ext = s // 2 ** (4 - k)
        shapes[f"decoder{k + 1}_upsample"] = (n, prev, ext, ext)
        if skips[k]:
            shapes[f"decoder{k + 1}_concat"] = (n, prev + skips[k], ext, ext)
        shapes[f"decoder{k + 1}"] = (n, d[k], ext, ext)
        prev = d[k]
    shapes["conv2"] = (n, 1, s, s)
    return shapes


@pytest.mark.parametrize("s,width", [(64, 1.0), (256, 0.125), (64, 0.25)])
def test_shape_suite(s, width):
    m = M.build(M.ModelConfig(width_multiplier=width))
    m.eval()
    feats = {}
    out = m(Tensor(np.zeros((1, 3, s, s), np.float32)), features=feats)
    exp = expected_shapes(s, width)
    for k, v in exp.items():
        assert feats[k] == v, k
    assert out.shape == (1, 1, s, s)


def test_stage1_resolution_output():
    m = M.build(M.ModelConfig(width_multiplier=0.125))
    m.eval()
    assert m(Tensor(np.zeros((1, 3, 256, 256), np.float32))).shape == (1, 1, 256, 256)


def test_block_layout_and_names():
    m = M.build()
    assert [len(e.layers) for e in m.encoders] == [3, 4, 6, 3]
    names = M.state_dict(m)
    assert "encoder1.0.downsample_conv.weight" not in names
    for stage in (2, 3, 4):
        assert f"encoder{stage}.0.downsample_conv.weight" in names
        assert f"encoder{stage}.1.downsample_conv.weight" not in names
    assert names["conv1.conv.weight"].shape == (64, 3, 7, 7)
    assert names["conv2.weight"].shape == (1, 16, 3, 3)


def test_encoder1_projection_switch():
    m = M.build(M.ModelConfig(encoder1_projection=True))
    assert M.state_dict(m)["encoder1.0.downsample_conv.weight"].shape == (64, 64, 1, 1)
    assert M.count_parameters(m) == M.count_parameters(M.build()) + 64 * 64 + 2 * 64


def test_adapter_first_layer():
    m = M.build(M.ModelConfig(in_channels=1, include_channel_adapter=True, width_multiplier=0.25))
    sd = M.state_dict(m)
    assert next(iter(sd)) == "adapter.weight"
    assert sd["adapter.weight"].shape == (3, 1, 1, 1) and sd["adapter.bias"].shape == (3,)
    m.eval()
    assert m(Tensor(np.zeros((1, 1, 64, 64), np.float32))).shape == (1, 1, 64, 64)


def test_config_errors():
    with pytest.raises(ValueError):
        M.ModelConfig(width_multiplier=0.3)
    with pytest.raises(ValueError):
        M.ModelConfig(width_multiplier=1.5)
    with pytest.raises(ValueError):
        M.ModelConfig(in_channels=2)
    with pytest.raises(ValueError):
        M.build(M.ModelConfig(width_multiplier=0.125))(Tensor(np.zeros((1, 3, 48, 48), np.float32)))


def test_output_range_and_determinism(rng):
    m = M.build(M.ModelConfig(width_multiplier=0.125), seed=4)
    m.eval()
    x = Tensor(rng.random((2, 3, 64, 64)).astype(np.float32))
    a = m(x).data
    b = m(x).data
    np.testing.assert_array_equal(a, b)
    assert np.all(a > 0) and np.all(a < 1)
    c = m(Tensor(np.full((1, 3, 64, 64), 0.5, np.float32))).data
    np.testing.assert_array_equal(c, m(Tensor(np.full((1, 3, 64, 64), 0.5, np.float32))).data)


def test_build_init():
    m = M.build(M.ModelConfig(width_multiplier=0.25), seed=0)
    w = M.state_dict(m)["encoder3.0.conv1.weight"]
    fan_in = w.shape[1] * 9
    assert abs(w.std() - np.sqrt(2 / fan_in)) < 0.1 * np.sqrt(2 / fan_in)
    bn = M.state_dict(m)
    assert np.all(bn["encoder3.0.bn1.weight"] == 1) and np.all(bn["encoder3.0.bn1.bias"] == 0)


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = M.build(M.ModelConfig(width_multiplier=0.25), seed=2)
    for s in m.batchnorms():
        s.running_mean[...] = np.random.default_rng(0).normal(size=s.channels)
    p = tmp_path / "m.nts"
    M.save_checkpoint(m, p)
    back = M.load_checkpoint(p)
    a, b = M.state_dict(m), M.state_dict(back)
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype
        np.testing.assert_array_equal(a[k], b[k])


def test_checkpoint_byte_layout(tmp_path):
    p = tmp_path / "t.nts"
    M.write_tensors({"ab": np.array([[1.0, 2.0, 3.0]], np.float32)}, p)
    raw = p.read_bytes()
    expected = (b"NTS1" + (1).to_bytes(4, "little") + (2).to_bytes(2, "little") + b"ab" + bytes([0, 2])
                + (1).to_bytes(4, "little") + (3).to_bytes(4, "little") + np.array([1, 2, 3], "<f4").tobytes())
    assert raw == expected


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.nts"
    p.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(M.CheckpointFormatError):
        M.read_tensors(p)
    good = tmp_path / "g.nts"
    M.write_tensors({"a": np.zeros(3, np.float32)}, good)
    good.write_bytes(good.read_bytes()[:-2])
    with pytest.raises(M.CheckpointFormatError, match="truncated"):
        M.read_tensors(good)
    m = M.build(M.ModelConfig(width_multiplier=0.25))
    sd = dict(M.state_dict(m))
    sd.pop("conv2.bias")
    sd["conv2.weight"] = np.zeros((1, 2, 3, 3), np.float32)
    sd["extra"] = np.zeros(1, np.float32)
    with pytest.raises(M.CheckpointMismatchError) as exc:
        M.load_state_dict(m, sd)
    msg = str(exc.value)
    assert "missing conv2.bias" in msg and "unexpected extra" in msg and "shape conv2.weight" in msg


def test_resolution_transfer(tmp_path, rng):
    """A stage-1 checkpoint loads into the model used at a higher resolution; outputs agree."""
    cfg = M.ModelConfig(width_multiplier=0.25)
    m = M.build(cfg, seed=5)
    m.train()
    m(Tensor(rng.random((2, 3, 64, 64)).astype(np.float32)))  # stage-1 style update of BN stats
    p = tmp_path / "s1.nts"
    M.save_checkpoint(m, p)
    m2 = M.load_checkpoint(p, cfg)
    m.eval()
    m2.eval()
    x = Tensor(rng.random((1, 3, 128, 128)).astype(np.float32))
    np.testing.assert_array_equal(m(x).data, m2(x).data)


def test_infer_config(tmp_path):
    cfg = M.ModelConfig(in_channels=1, width_multiplier=0.5, include_channel_adapter=True)
    p = tmp_path / "a.nts"
    M.save_checkpoint(M.build(cfg), p)
    assert M.infer_config(M.read_tensors(p)) == cfg


def test_float64_mode_roundtrip(tmp_path):
    m = M.build(M.ModelConfig(width_multiplier=0.125), dtype=np.float64)
    p = tmp_path / "d.nts"
    M.save_checkpoint(m, p)
    assert all(v.dtype == np.float64 for v in M.read_tensors(p).values())
