"""Binary tensor container and the bundle format built on top of it.

Single tensor layout (little-endian throughout):

    magic   4 bytes  b"LSEF"
    version u16      currently 1
    dtype   u8       0 = float32, 1 = float64
    rank    u8
    extents rank x u64
    payload raw row-major scalars

Checkpoints and dataset files are bundles: a JSON metadata block followed by
named tensor containers.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"LSEF"
BUNDLE_MAGIC = b"LSEFBNDL"
FORMAT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(stream, array):
    arr = np.asarray(array, order="C")  # ascontiguousarray would promote 0-d to 1-d
    if arr.dtype not in _TAG_FOR_KIND:
        raise DataError(f"container stores f32/f64 tensors only, got {arr.dtype}")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<H", FORMAT_VERSION))
    stream.write(struct.pack("<B", _TAG_FOR_KIND[arr.dtype]))
    stream.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        stream.write(struct.pack("<Q", extent))
    stream.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def read_tensor(stream):
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    (version,) = struct.unpack("<H", stream.read(2))
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported tensor format version {version}")
    (tag,) = struct.unpack("<B", stream.read(1))
    if tag not in _DTYPE_TAGS:
        raise DataError(f"unknown dtype tag {tag}")
    (rank,) = struct.unpack("<B", stream.read(1))
    shape = tuple(struct.unpack("<Q", stream.read(8))[0] for _ in range(rank))
    dtype = _DTYPE_TAGS[tag]
    count = 1
    for extent in shape:
        count *= extent
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise DataError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_bundle(path, tensors, meta=None):
    """Write named arrays plus a JSON meta dict; ordering is preserved."""
    try:
        with open(path, "wb") as stream:
            stream.write(BUNDLE_MAGIC)
            stream.write(struct.pack("<H", FORMAT_VERSION))
            blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
            stream.write(struct.pack("<Q", len(blob)))
            stream.write(blob)
            stream.write(struct.pack("<I", len(tensors)))
            for name, array in tensors.items():
                encoded = name.encode("utf-8")
                stream.write(struct.pack("<H", len(encoded)))
                stream.write(encoded)
                write_tensor(stream, array)
    except OSError as err:
        raise DataError(f"cannot write {path}: {err}") from err


def load_bundle(path):
    try:
        with open(path, "rb") as stream:
            magic = stream.read(8)
            if magic != BUNDLE_MAGIC:
                raise DataError(f"{path} is not a tensor bundle (magic {magic!r})")
            (version,) = struct.unpack("<H", stream.read(2))
            if version != FORMAT_VERSION:
                raise DataError(f"unsupported bundle version {version}")
            (meta_len,) = struct.unpack("<Q", stream.read(8))
            meta = json.loads(stream.read(meta_len).decode("utf-8"))
            (count,) = struct.unpack("<I", stream.read(4))
            tensors = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<H", stream.read(2))
                name = stream.read(name_len).decode("utf-8")
                tensors[name] = read_tensor(stream)
            return tensors, meta
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
