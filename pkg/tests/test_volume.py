import struct

import numpy as np
import pytest

from isample.volume import (
    LabelMap,
    Volume,
    VolumeFormatError,
    clamp_normalize,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)


def test_clamp_normalize_examples():
    v = Volume(np.array([[1500.0, -2000.0, 0.0]]), (1.0, 1.0))
    out = clamp_normalize(v).voxels[0]
    assert out[0] == pytest.approx(4.58716, abs=1e-5)
    assert out[1] == pytest.approx(-4.58716, abs=1e-5)
    assert out[2] == 0.0


def test_clamp_normalize_pointwise_rule_and_range():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(-5000, 5000, size=tuple(rng.integers(2, 12, size=2)))
        v = Volume(x, (1.0, 2.0))
        out = clamp_normalize(v)
        expected = (np.clip(v.voxels.astype(np.float64), -1000, 1000) / 218).astype(np.float32)
        np.testing.assert_array_equal(out.voxels, expected)
        assert np.all(np.abs(out.voxels) <= np.float32(1000 / 218))
        assert out.spacing == v.spacing and out.dims == v.dims


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)), (1.0, 0.0))
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)), (1.0,))
    with pytest.raises(ValueError):
        Volume(np.zeros(4), (1.0,))
    v = Volume(np.zeros((3, 4)), (1.0, 1.0))
    assert v.voxels.size == np.prod(v.dims)
    with pytest.raises(ValueError):
        v.voxels[0, 0] = 1.0  # immutable


def test_labelmap_invariants():
    with pytest.raises(ValueError):
        LabelMap(np.array([[0, 2]]), 2)
    with pytest.raises(ValueError):
        LabelMap(np.zeros((2, 2), int), 1)
    lab = LabelMap(np.zeros((2, 3), int), 2)
    with pytest.raises(ValueError):
        lab.check_pair(Volume(np.zeros((3, 2)), (1.0, 1.0)))


def test_round_trip_random_volumes(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        rank = int(rng.integers(2, 4))
        dims = tuple(int(d) for d in rng.integers(1, 9, size=rank))
        spacing = tuple(float(s) for s in rng.uniform(0.2, 3.0, size=rank))
        v = Volume(rng.standard_normal(dims) * 500, spacing, f"v{i}")
        path = tmp_path / f"v{i}.isvl"
        save_volume(v, path)
        w = load_volume(path)
        assert w.dims == v.dims and w.spacing == v.spacing
        assert w.voxels.tobytes() == v.voxels.tobytes()


def test_spacing_preserved_exactly(tmp_path):
    v = Volume(np.ones((2, 3, 4)), (1.0, 1.0, 1.5))
    save_volume(v, tmp_path / "a.isvl")
    assert load_volume(tmp_path / "a.isvl").spacing == (1.0, 1.0, 1.5)


def test_label_round_trip(tmp_path):
    lab = LabelMap(np.random.default_rng(1).integers(0, 5, (6, 7)), 5, (1.0, 2.0))
    save_labels(lab, tmp_path / "l.isvl")
    back = load_labels(tmp_path / "l.isvl", 5)
    np.testing.assert_array_equal(back.labels, lab.labels)
    assert back.spacing == lab.spacing
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "l.isvl")


def test_file_layout_is_bit_exact(tmp_path):
    v = Volume(np.arange(6, dtype=np.float32).reshape(2, 3), (1.0, 0.5))
    save_volume(v, tmp_path / "a.isvl")
    raw = (tmp_path / "a.isvl").read_bytes()
    header = b"ISVL" + struct.pack("<HH", 1, 2) + struct.pack("<If", 2, 1.0) + struct.pack("<If", 3, 0.5) + b"\x00"
    assert raw == header + np.arange(6, dtype="<f4").tobytes()


def _raw(dims, payload_count, tag=0, magic=b"ISVL"):
    out = magic + struct.pack("<HH", 1, len(dims))
    for d in dims:
        out += struct.pack("<If", d, 1.0)
    out += struct.pack("<B", tag)
    return out + np.zeros(payload_count, "<f4" if tag == 0 else "<u2").tobytes()


def test_voxel_count_mismatch_rejected(tmp_path):
    p = tmp_path / "bad.isvl"
    p.write_bytes(_raw((2, 5), 9))  # header says 10 voxels, payload holds 9
    with pytest.raises(VolumeFormatError, match="10 voxels"):
        load_volume(p)


@pytest.mark.parametrize(
    "blob, field",
    [
        (_raw((2, 2), 4, magic=b"XXXX"), "magic"),
        (_raw((2, 2), 4, tag=7), "dtype tag"),
        (b"ISVL" + struct.pack("<HHIfIfB", 1, 2, 2, 1.0, 2, -1.0, 0) + bytes(16), "spacing of axis 1"),
        (b"ISVL" + struct.pack("<HH", 1, 2) + struct.pack("<If", 2, 1.0), "truncated header"),
        (b"ISVL" + struct.pack("<HH", 1, 5), "rank"),
    ],
)
def test_malformed_headers_name_the_field(tmp_path, blob, field):
    p = tmp_path / "bad.isvl"
    p.write_bytes(blob)
    with pytest.raises(VolumeFormatError, match=field):
        load_volume(p)
