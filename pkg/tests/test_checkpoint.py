import numpy as np
import pytest

from conftest import randomize, tiny_config
from isample.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from isample.dualpath import DualPathConfig, DualPathNet


def test_round_trip_is_exact(tmp_path, rng):
    model = randomize(DualPathNet(DualPathConfig(), rng), rng)
    model.version = 17
    path = tmp_path / "m.isck"
    save_checkpoint(model, path, {"iteration": 5})
    header, tensors = read_checkpoint(path)
    assert header["iteration"] == 5 and header["model_version"] == 17
    back = load_checkpoint(path, DualPathConfig())
    assert back.version == 17
    for a, b in zip(model.params(), back.params()):
        assert a.name == b.name and a.value.tobytes() == b.value.tobytes()
    high = rng.standard_normal((1, 1, 19, 19)).astype(np.float32)
    low = rng.standard_normal((1, 1, 17, 17)).astype(np.float32)
    model.set_stats_ready(True)
    np.testing.assert_array_equal(model.forward(high, low), back.forward(high, low))


def test_architecture_mismatch_rejected(tmp_path, rng):
    path = tmp_path / "m.isck"
    save_checkpoint(DualPathNet(tiny_config(), rng), path)
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path, tiny_config(head_widths=[5]))
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path, DualPathConfig())


def test_corrupt_files_rejected(tmp_path, rng):
    path = tmp_path / "m.isck"
    save_checkpoint(DualPathNet(tiny_config(), rng), path)
    raw = path.read_bytes()
    (tmp_path / "magic.isck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "magic.isck")
    (tmp_path / "short.isck").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "short.isck")
    (tmp_path / "long.isck").write_bytes(raw + b"\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "long.isck")
