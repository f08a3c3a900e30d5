"""Binary weight-file format.

Little-endian, no padding between records::

    magic   6 bytes  b"EHDRW\\0"
    version u16      1
    count   u32      number of tensors
    then per tensor:
        u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
        prod(dims) float32 values in row-major order
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"EHDRW\x00"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def encode_weights(ws) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(ws))]
    for name, arr in ws.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, "<f4")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise WeightFormatError(f"{name!r}: name or rank too large for the format")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"truncated file while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weights(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise WeightFormatError("bad magic: not an EHDRW weight file")
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}; expected {VERSION}")
    ws = OrderedDict()
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError(f"tensor {i}: name is not valid UTF-8") from None
        if name in ws:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * n, f"data of {name} ({n} values)")
        ws[name] = np.frombuffer(data, "<f4").astype(np.float32).reshape(dims)
    if r.pos != len(buf):
        raise WeightFormatError(f"{len(buf) - r.pos} trailing bytes after {count} tensors")
    return ws


def save_weights(ws, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_weights(ws))


def load_weights(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
