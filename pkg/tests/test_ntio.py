import json
import struct

import numpy as np
import pytest

from promptdt.errors import FormatError
from promptdt.ntio import load_tensors, save_tensors


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "b.bias": rng.normal(size=(7,)).astype(np.float64),
        "scalar": np.array(3.25, dtype=np.float32),
    }


def test_round_trip_bit_exact(tmp_path, tensors):
    path = tmp_path / "w.nt"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()


def test_identical_dict_identical_bytes(tmp_path, tensors):
    p1, p2 = tmp_path / "1.nt", tmp_path / "2.nt"
    save_tensors(p1, tensors)
    save_tensors(p2, dict(reversed(list(tensors.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_header_layout(tmp_path, tensors):
    path = tmp_path / "w.nt"
    save_tensors(path, tensors)
    blob = path.read_bytes()
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + n])
    assert header["a.weight"]["dtype"] == "f32"
    assert header["a.weight"]["shape"] == [3, 4]
    begin, end = header["a.weight"]["data_offsets"]
    assert end - begin == 3 * 4 * 4


def test_truncated_file(tmp_path, tensors):
    path = tmp_path / "w.nt"
    save_tensors(path, tensors)
    blob = path.read_bytes()
    (tmp_path / "t.nt").write_bytes(blob[: len(blob) - 5])
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "t.nt")


def test_truncated_header(tmp_path):
    (tmp_path / "t.nt").write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "t.nt")


def test_overlapping_offsets(tmp_path):
    hdr = json.dumps({
        "x": {"dtype": "f32", "shape": [2], "data_offsets": [0, 8]},
        "y": {"dtype": "f32", "shape": [2], "data_offsets": [4, 12]},
    }).encode()
    (tmp_path / "o.nt").write_bytes(struct.pack("<Q", len(hdr)) + hdr + b"\0" * 12)
    with pytest.raises(FormatError, match="overlap"):
        load_tensors(tmp_path / "o.nt")


def test_span_shape_mismatch(tmp_path):
    hdr = json.dumps({"x": {"dtype": "f32", "shape": [3], "data_offsets": [0, 8]}}).encode()
    (tmp_path / "m.nt").write_bytes(struct.pack("<Q", len(hdr)) + hdr + b"\0" * 8)
    with pytest.raises(FormatError, match="x"):
        load_tensors(tmp_path / "m.nt")


def test_bad_dtype_rejected_on_save(tmp_path):
    with pytest.raises(FormatError):
        save_tensors(tmp_path / "i.nt", {"ids": np.arange(3)})
