import json
import struct

import numpy as np
import pytest

from perceptdist import checkpoint as ckpt
from perceptdist.model import (
    PARAMETER_BUDGET,
    PerceptNet,
    PerceptNetConfig,
    count_parameters,
    init,
    load,
    load_checkpoint,
    save,
)
from perceptdist.tensor import GdnParams, l2_feature_distance


class _Only:
    def __init__(self, gdn):
        self.g = gdn

    def parameters(self):
        return {"beta": self.g.beta, "gamma": self.g.gamma}


def test_default_parameter_count():
    per_stage = [3 + 3, 9 + 3, 9 + 3, 5 * 5 * 3 * 6 + 6, 36 + 6, 5 * 5 * 6 * 128 + 128, 128 * 128 + 128]
    assert per_stage == [6, 12, 12, 456, 42, 19328, 16512]
    assert sum(per_stage) == 36368 == PARAMETER_BUDGET
    assert count_parameters(init()) == 36368


def test_gdn_only_counts():
    assert count_parameters(_Only(GdnParams.create(3, diagonal_only=True))) == 6
    assert count_parameters(_Only(GdnParams.create(128))) == 128 * 128 + 128


def test_stage_structure():
    m = init()
    assert [n for n, _ in m.stages()] == ["gdn1", "conv1", "gdn2", "conv2", "gdn3", "conv3", "gdn4"]
    assert m.gdn1.diagonal_only
    assert not any(g.diagonal_only for g in (m.gdn2, m.gdn3, m.gdn4))


def test_forward_shape(rng):
    out = init().forward(rng.random((1, 3, 64, 64)))
    assert out.shape == (1, 128, 16, 16)
    out = init().forward(rng.random((2, 3, 16, 24)))
    assert out.shape == (2, 128, 4, 6)


def test_forward_is_deterministic(rng):
    m = init(seed=5)
    x = rng.random((2, 3, 32, 32))
    np.testing.assert_array_equal(m(x).data, m(x).data)
    np.testing.assert_array_equal(init(seed=5)(x).data, m(x).data)


def test_fresh_model_separates_distinct_inputs(rng):
    m = init(seed=0)
    x, y = rng.random((1, 3, 32, 32)), rng.random((1, 3, 32, 32))
    assert l2_feature_distance(m(x), m(y)).data.item() > 0


def test_forward_errors(rng):
    m = init()
    with pytest.raises(ValueError, match="n x 3"):
        m(rng.random((1, 1, 16, 16)))
    with pytest.raises(ValueError, match="divisible"):
        m(rng.random((1, 3, 18, 16)))


def test_init_values():
    m = init(seed=3)
    for g in m.gdn_layers():
        assert np.all(g.beta.data == 1.0)
        gm = g.gamma_matrix()
        np.testing.assert_allclose(np.diag(gm), 0.1, rtol=1e-6)
        assert np.all(gm[~np.eye(len(gm), dtype=bool)] == 0)
    for conv in (m.conv1, m.conv2, m.conv3):
        cout, cin, k, _ = conv.weight.shape
        limit = np.sqrt(6.0 / (cin * k * k + cout * k * k))
        assert np.all(np.abs(conv.weight.data) <= limit)
        assert np.all(conv.bias.data == 0)


def test_init_reproducibility():
    a, b, c = init(seed=1), init(seed=1), init(seed=2)
    for name in a.parameters():
        np.testing.assert_array_equal(a.parameters()[name].data, b.parameters()[name].data)
    assert not np.array_equal(a.conv1.weight.data, c.conv1.weight.data)


def test_save_load_roundtrip(tmp_path, rng):
    m = init(seed=9)
    m.conv2.weight.data[...] = rng.normal(size=m.conv2.weight.shape)
    save(m, tmp_path / "m.pnet", epoch=4)
    m2, header, extra = load_checkpoint(tmp_path / "m.pnet")
    assert header["epoch"] == 4 and header["seed"] == 9 and extra == {}
    for name, p in m.parameters().items():
        assert p.data.tobytes() == m2.parameters()[name].data.tobytes()
    # saving the loaded model gives an identical file
    save(m2, tmp_path / "m2.pnet", epoch=4)
    assert (tmp_path / "m.pnet").read_bytes() == (tmp_path / "m2.pnet").read_bytes()


def test_file_layout(tmp_path):
    save(init(), tmp_path / "m.pnet")
    blob = (tmp_path / "m.pnet").read_bytes()
    assert blob[:4] == b"PNET"
    version, hlen = struct.unpack("<II", blob[4:12])
    assert version == 1
    header = json.loads(blob[12:12 + hlen])
    entries = header["tensors"]
    assert [e["name"] for e in entries][:2] == ["gdn1.beta", "gdn1.gamma"]
    assert sum(e["nbytes"] for e in entries) == len(blob) - 12 - hlen == 4 * 36368
    first = entries[0]
    payload = np.frombuffer(blob[12 + hlen:], dtype="<f4", count=3)
    assert first["shape"] == [3] and np.all(payload == 1.0)


def test_truncated_file_is_corrupt(tmp_path):
    save(init(), tmp_path / "m.pnet")
    blob = (tmp_path / "m.pnet").read_bytes()
    for cut in (3, 10, 40, len(blob) - 7):
        (tmp_path / "t.pnet").write_bytes(blob[:cut])
        with pytest.raises(ckpt.CorruptCheckpointError):
            load(tmp_path / "t.pnet")


def test_version_mismatch(tmp_path):
    save(init(), tmp_path / "m.pnet")
    blob = bytearray((tmp_path / "m.pnet").read_bytes())
    blob[4:8] = struct.pack("<I", 2)
    (tmp_path / "v.pnet").write_bytes(bytes(blob))
    with pytest.raises(ckpt.VersionMismatchError):
        load(tmp_path / "v.pnet")


def test_shape_mismatch_against_config(tmp_path):
    m = init()
    state = m.state_dict()
    state["conv3.weight"] = state["conv3.weight"][:127]
    state["conv3.bias"] = state["conv3.bias"][:127]
    from perceptdist.model import config_hash
    cfg = m.config_dict()
    ckpt.write_container(tmp_path / "bad.pnet",
                         {"config": cfg, "config_hash": config_hash(cfg), "seed": 0, "epoch": 0},
                         state)
    with pytest.raises(ckpt.ShapeMismatchError, match="conv3"):
        load(tmp_path / "bad.pnet")


def test_custom_config_roundtrip(tmp_path):
    cfg = PerceptNetConfig(channels=(3, 3, 4, 8))
    m = PerceptNet(cfg, seed=2)
    save(m, tmp_path / "c.pnet")
    m2 = load(tmp_path / "c.pnet")
    assert m2.config == cfg
    assert count_parameters(m2) == count_parameters(m)


def test_invalid_config():
    with pytest.raises(ValueError):
        PerceptNetConfig(kernel_sizes=(1, 4, 5))
    with pytest.raises(ValueError):
        PerceptNetConfig(channels=(1, 3, 6, 128))
