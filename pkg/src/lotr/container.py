"""Binary container holding named tensors.

Layout: magic "LOTR", version u32, entry count u32; per entry the name
(u16 length + UTF-8 bytes), a dtype byte (0 = f64, 1 = f32), rank u8,
dims as u64, then raw values. All integers and floats little-endian.
"""

import struct

import numpy as np

MAGIC = b"LOTR"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class ContainerError(IOError):
    """Corrupt or truncated tensor container."""


def write_tensors(path, tensors):
    """Write an ordered mapping of name -> ndarray to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float64)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensors(path):
    """Read a container back into an ordered dict of name -> ndarray."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ContainerError(f"truncated container {path}: expected {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ContainerError(f"bad magic in {path}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} in {path}")

    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2, "entry header"))
        if dtype_code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {dtype_code} in {path}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims")) if rank else ()
        dtype = _DTYPES[dtype_code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        data = np.frombuffer(take(nbytes, f"data for {name}"), dtype=dtype)
        out[name] = data.reshape(dims).astype(dtype.newbyteorder("=")).copy()
    if pos != len(blob):
        raise ContainerError(f"trailing bytes in {path}")
    return out
