"""Flat binary container for named arrays.

Layout: magic (4 bytes), version u32, count u32, then per entry:
name_len u16, name utf-8, dtype code u8, rank u8, dims u32 * rank,
raw little-endian data.
"""
from __future__ import annotations

import struct

import numpy as np

VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("uint8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(IOError):
    pass


def write_arrays(path, arrays, magic=b"SGAC"):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.ndim:
                # note: ascontiguousarray would promote 0-d to shape (1,)
                arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            arr = arr.astype(dt, copy=False)
            if arr.dtype not in _DTYPE_CODES:
                raise ContainerError(f"unsupported dtype {arr.dtype} for '{name}'")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_arrays(path, magic=b"SGAC"):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != magic:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {magic!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", data, off)
        off += 8
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", data, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(data):
                raise ContainerError(f"truncated container at entry '{name}'")
            out[name] = np.frombuffer(data[off:off + nbytes], dtype=dt).reshape(dims).copy()
            off += nbytes
    except struct.error as e:
        raise ContainerError(f"truncated container: {e}") from e
    return out
