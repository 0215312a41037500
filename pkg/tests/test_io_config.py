import numpy as np
import pytest

from implab import config
from implab.exceptions import ConfigurationError, FormatError
from implab.io import load_checkpoint, load_mask, save_checkpoint, save_mask
from implab.masks import Mask
from implab.model import ModelSpec, Network
from implab.tables import read_table, write_table
from implab.train import Checkpoint


def test_checkpoint_bit_exact(tmp_path, rng):
    net = Network(ModelSpec(input_shape=(3,), widths=(4,), n_classes=2))
    params = net.init().replace(rng.normal(size=net.layout.size) * 1e-300)
    ck = Checkpoint(17, params, rng.normal(size=net.layout.size), 99, {"note": "x"})
    save_checkpoint(tmp_path / "a.plck", ck, net.spec)
    back, meta = load_checkpoint(tmp_path / "a.plck")
    assert back.params.values.tobytes() == ck.params.values.tobytes()
    assert back.momentum.tobytes() == ck.momentum.tobytes()
    assert (back.step, back.data_seed, back.meta["note"]) == (17, 99, "x")
    assert ModelSpec.from_dict(meta["spec"]) == net.spec
    raw = (tmp_path / "a.plck").read_bytes()
    assert raw[:4] == b"PLCK" and int.from_bytes(raw[4:8], "little") == 1
    n = int.from_bytes(raw[8:16], "little")
    assert len(raw) == 16 + n + 16 * net.layout.size


def test_checkpoint_corruption_detected(tmp_path):
    net = Network(ModelSpec(input_shape=(2,), widths=(3,)))
    save_checkpoint(tmp_path / "a.plck", Checkpoint(0, net.init()), net.spec)
    raw = (tmp_path / "a.plck").read_bytes()
    (tmp_path / "b.plck").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "c.plck").write_bytes(raw[:-3])
    for name in ("b.plck", "c.plck"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)


@pytest.mark.parametrize("n", [1, 7, 8, 9, 1000])
def test_mask_roundtrip(tmp_path, rng, n):
    m = Mask(rng.uniform(size=n) < 0.5, level=3)
    save_mask(tmp_path / "m.plmk", m, {"tau": 5})
    back, meta = load_mask(tmp_path / "m.plmk")
    assert back == m and back.level == 3 and meta["tau"] == 5
    assert (tmp_path / "m.plmk").read_bytes()[:4] == b"PLMK"


def test_mask_bit_order(tmp_path):
    save_mask(tmp_path / "m.plmk", Mask(np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 1], bool)))
    raw = (tmp_path / "m.plmk").read_bytes()
    assert raw[-2:] == bytes([0b00000001, 0b00000010])


def test_table_roundtrip_and_validation(tmp_path):
    rows = [dict(gamma=0.1, train_loss=0.25, test_error=1 / 3)]
    write_table(tmp_path / "p.csv", "path", rows, {"eps": 0.01})
    meta, back = read_table(tmp_path / "p.csv", "path")
    assert back == rows and meta["eps"] == 0.01
    with pytest.raises(FormatError):
        read_table(tmp_path / "p.csv", "matrix")
    (tmp_path / "q.csv").write_text("gamma,train_loss,test_error\n0,0,0\n")
    with pytest.raises(FormatError):
        read_table(tmp_path / "q.csv")


def test_config_roundtrip():
    text = """
[experiment]
kind = imp
seed = 4

[schedule]
lr = 0.05
total_steps = 3000
milestones = 1500, 2250
nesterov = false
single = 3,
"""
    parsed = config.loads(text)
    assert parsed["schedule"]["milestones"] == [1500, 2250]
    assert parsed["schedule"]["single"] == [3]
    again = config.loads(config.dumps(parsed))
    assert again == parsed
    assert config.loads(config.dumps(again)) == again


def test_config_float_repr_exact():
    cfg = {"a": {"x": 0.1 + 0.2, "y": 1e-300}}
    assert config.loads(config.dumps(cfg)) == cfg


def test_manifest_requires_seed():
    with pytest.raises(ConfigurationError):
        config.ExperimentManifest.from_config({"experiment": {"kind": "imp"}})
    m = config.ExperimentManifest.from_config({"experiment": {"kind": "imp"}}, seed=3)
    assert m.seed == 3


def test_malformed_config():
    with pytest.raises(ConfigurationError):
        config.loads("[no closing bracket\nx=1")
