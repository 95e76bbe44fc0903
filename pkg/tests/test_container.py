import struct

import numpy as np
import pytest

from lotr.container import ContainerError, read_tensors, write_tensors


def test_roundtrip(tmp_path):
    rng = np.random.Generator(np.random.Philox(key=1))
    tensors = {
        "a": rng.normal(size=(3, 4)),
        "b": np.arange(5, dtype=np.float64),
        "scalar": np.array(7.5),
    }
    path = tmp_path / "t.lotr"
    write_tensors(path, tensors)
    back = read_tensors(path)
    assert set(back) == set(tensors)
    for name in tensors:
        assert back[name].dtype == np.float64
        assert np.array_equal(back[name], tensors[name])


def test_byte_layout_parsed_by_hand(tmp_path):
    arr = np.array([[1.0, 2.0], [3.0, 4.0]])
    path = tmp_path / "t.lotr"
    write_tensors(path, {"w": arr})
    raw = path.read_bytes()
    assert raw[:4] == b"LOTR"
    version, count = struct.unpack_from("<II", raw, 4)
    assert count == 1
    off = 12
    (name_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    assert raw[off:off + name_len].decode() == "w"
    off += name_len
    dtype_byte, rank = raw[off], raw[off + 1]
    assert dtype_byte == 0 and rank == 2
    off += 2
    dims = struct.unpack_from("<2Q", raw, off)
    assert dims == (2, 2)
    off += 16
    vals = np.frombuffer(raw, dtype="<f8", count=4, offset=off)
    assert np.array_equal(vals.reshape(2, 2), arr)
    assert off + 32 == len(raw)


def test_float32_entries_supported(tmp_path):
    arr = np.linspace(0, 1, 6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.lotr"
    write_tensors(path, {"x": arr})
    raw = bytearray(path.read_bytes())
    # dtype byte sits right after the name
    assert raw[12 + 2 + 1] == 1
    back = read_tensors(path)
    assert back["x"].dtype == np.float32
    assert np.array_equal(back["x"], arr)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "t.lotr"
    write_tensors(path, {"x": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        read_tensors(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.lotr"
    write_tensors(path, {"x": np.arange(10, dtype=np.float64)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(ContainerError):
        read_tensors(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.lotr"
    write_tensors(path, {"x": np.zeros(3)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ContainerError):
        read_tensors(path)


def test_unknown_dtype_rejected(tmp_path):
    path = tmp_path / "t.lotr"
    write_tensors(path, {"x": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[12 + 2 + 1] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        read_tensors(path)
