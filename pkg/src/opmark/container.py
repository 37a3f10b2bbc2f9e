"""Versioned binary container shared by matrices, ICA models and tree ensembles.

Layout (little endian)::

    magic[4] | u16 version | u32 header length | header (UTF-8 JSON) | arrays

The header lists each array's name, dtype and shape in storage order; arrays
follow back to back as raw bytes, so float64 payloads reload bit-for-bit.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")


class ContainerError(ValueError):
    pass


def dumps(magic: bytes, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    specs, blobs = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dtype = a.dtype.newbyteorder("<")
        specs.append({"name": name, "dtype": dtype.str, "shape": list(a.shape)})
        blobs.append(a.astype(dtype, copy=False).tobytes())
    header = json.dumps({"meta": dict(meta), "arrays": specs}, sort_keys=True).encode()
    return _PREAMBLE.pack(magic, VERSION, len(header)) + header + b"".join(blobs)


def loads(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREAMBLE.size:
        raise ContainerError("truncated container")
    got, version, hlen = _PREAMBLE.unpack_from(data)
    if got != magic:
        raise ContainerError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = _PREAMBLE.size
    header = json.loads(data[start:start + hlen])
    pos = start + hlen
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(data):
            raise ContainerError(f"truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, dtype, count, pos).reshape(spec["shape"]).copy()
        pos += nbytes
    return header["meta"], arrays


def save(path, magic: bytes, meta, arrays) -> None:
    Path(path).write_bytes(dumps(magic, meta, arrays))


def load(path, magic: bytes):
    return loads(Path(path).read_bytes(), magic)
