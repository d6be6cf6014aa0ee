"""DSDF tensor container.

Layout::

    b"DSDF" | version (u8) | header length (u32, little-endian) | JSON header |
    tensor payloads, little-endian, in header order

The header is ``{"meta": {...}, "tensors": [{"name", "shape", "dtype"}, ...]}``.
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSDF"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


class ContainerError(ValueError):
    pass


def dumps(tensors, meta=None):
    entries, payload = [], []
    for name, value in tensors.items():
        arr = np.asarray(value)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype} for tensor {name!r}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<BI", VERSION, len(header)) + header + b"".join(payload)


def loads(blob):
    if blob[:4] != MAGIC:
        raise ContainerError("not a DSDF container (bad magic)")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported DSDF version {version}")
    offset = 9
    header = json.loads(blob[offset:offset + hlen])
    offset += hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(blob):
            raise ContainerError(f"truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
        offset += nbytes
    if offset != len(blob):
        raise ContainerError("trailing bytes after last tensor")
    return tensors, header["meta"]


def save(path, tensors, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, meta))
    return path


def load(path):
    return loads(Path(path).read_bytes())


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
