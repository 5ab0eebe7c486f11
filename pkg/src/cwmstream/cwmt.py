"""CWMT tensor container.

Layout: ``b"CWMT"``, u8 version (1), u8 dtype (0 = float32, 1 = float64),
u8 ndim, u8 reserved (0), ndim little-endian u32 dims, then the raw
little-endian row-major element data.
"""
import struct

import numpy as np

MAGIC = b"CWMT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CwmtError(ValueError):
    pass


def encode(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    if arr.dtype not in _CODES:
        raise TypeError(f"CWMT stores float32/float64, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BBBB", VERSION, _CODES[arr.dtype], arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    data = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
    return header + dims + data


def decode(buf, name="<buffer>"):
    if len(buf) < 8:
        raise CwmtError(f"{name}: truncated header")
    if buf[:4] != MAGIC:
        raise CwmtError(f"{name}: bad magic {buf[:4]!r}")
    version, code, ndim, _ = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise CwmtError(f"{name}: unsupported version {version}")
    if code not in _DTYPES:
        raise CwmtError(f"{name}: unknown dtype code {code}")
    if len(buf) < 8 + 4 * ndim:
        raise CwmtError(f"{name}: truncated dims")
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    dtype = _DTYPES[code]
    offset = 8 + 4 * ndim
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise CwmtError(f"{name}: expected {expected} data bytes, found {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path, arr):
    with open(path, "wb") as f:
        f.write(encode(arr))


def load(path):
    with open(path, "rb") as f:
        return decode(f.read(), str(path))
