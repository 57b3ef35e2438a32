"""Writer/reader for the RINEWTS1 weight-container format.

Implemented directly from the documented format (magic,
u64-LE header length, JSON manifest, 64-byte-aligned row-major tensors)
rather than imported from the detector package: the file format is the
interface between the two, and an independent implementation keeps the
round-trip honest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RINEWTS1"
FORMAT_VERSION = 1
_ALIGN = 64
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def write_container(path, kind: str, meta: dict, tensors: dict) -> None:
    names = sorted(tensors)
    directory, blobs, offset = {}, [], 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        directory[name] = {"dtype": "f4", "shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw) + _pad(len(raw))
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta,
         "tensors": directory},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(b"\0" * _pad(f.tell()))
        for raw in blobs:
            f.write(raw)
            f.write(b"\0" * _pad(len(raw)))


def read_container(path):
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    (header_len,) = struct.unpack_from("<Q", data, len(MAGIC))
    header_start = len(MAGIC) + 8
    manifest = json.loads(data[header_start : header_start + header_len].decode())
    payload = header_start + header_len + _pad(header_start + header_len)
    tensors = {}
    for name, entry in manifest["tensors"].items():
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = payload + entry["offset"]
        tensors[name] = (
            np.frombuffer(data[start : start + count * dt.itemsize], dtype=dt)
            .reshape(shape)
            .copy()
        )
    return manifest, tensors
