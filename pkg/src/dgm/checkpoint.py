"""Length-prefixed binary checkpoint container.

Layout (little-endian)::

    b"DGMC"  u16 version  u32 entry_count
    entry*:  u16 name_len  name(utf-8)  u8 kind  payload

    kind 0  array:   u8 dtype_len dtype(ascii, numpy str)  u8 ndim  u64*ndim dims
                     u64 nbytes  raw bytes (C order)
    kind 1  bitset:  u8 ndim  u64*ndim dims  u64 nbytes  np.packbits bytes
    kind 2  json:    u64 nbytes  utf-8 JSON

Booleans are stored as bitsets; everything round-trips exactly.
"""
import json
import struct

import numpy as np

MAGIC = b"DGMC"
VERSION = 1
ARRAY, BITSET, JSON = 0, 1, 2


class CheckpointError(ValueError):
    pass


def _dims(arr):
    return struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)


def dumps(entries):
    """Serialize a ``{name: ndarray | bool ndarray | json-able}`` mapping."""
    out = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, value in entries.items():
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        if isinstance(value, np.ndarray) and value.dtype == np.bool_:
            bits = np.packbits(value.reshape(-1)).tobytes()
            out.append(struct.pack("<B", BITSET) + _dims(value) + struct.pack("<Q", len(bits)) + bits)
        elif isinstance(value, np.ndarray):
            # not ascontiguousarray: it would promote 0-d arrays to 1-d
            arr = np.array(value, order="C", copy=True)
            dt = arr.dtype.newbyteorder("<").str.encode("ascii")
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            out.append(struct.pack("<BB", ARRAY, len(dt)) + dt + _dims(arr) + struct.pack("<Q", len(raw)) + raw)
        else:
            raw = json.dumps(value, sort_keys=True).encode("utf-8")
            out.append(struct.pack("<BQ", JSON, len(raw)) + raw)
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def dims(self):
        (ndim,) = self.unpack("<B")
        return self.unpack(f"<{ndim}Q") if ndim else ()


def loads(buf):
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode("utf-8")
        (kind,) = r.unpack("<B")
        if kind == ARRAY:
            (dlen,) = r.unpack("<B")
            dtype = np.dtype(r.take(dlen).decode("ascii"))
            shape = r.dims()
            (nbytes,) = r.unpack("<Q")
            arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
            entries[name] = arr.astype(dtype.newbyteorder("="))
        elif kind == BITSET:
            shape = r.dims()
            (nbytes,) = r.unpack("<Q")
            size = int(np.prod(shape)) if shape else 1
            bits = np.unpackbits(np.frombuffer(r.take(nbytes), dtype=np.uint8), count=size)
            entries[name] = bits.astype(bool).reshape(shape)
        elif kind == JSON:
            (nbytes,) = r.unpack("<Q")
            entries[name] = json.loads(r.take(nbytes).decode("utf-8"))
        else:
            raise CheckpointError(f"unknown entry kind {kind} for {name!r}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last entry")
    return entries


def save(path, entries):
    with open(path, "wb") as fh:
        fh.write(dumps(entries))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
