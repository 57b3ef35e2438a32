"""Binary weight-container I/O.

One file format serves backbone weights, head checkpoints, and training
checkpoints:

    bytes 0..8    magic ``RINEWTS1``
    bytes 8..16   u64 little-endian header length
    header        UTF-8 JSON manifest
    payload       raw little-endian tensors, each 64-byte aligned,
                  row-major (C order)

The manifest carries ``format_version``, a ``kind`` tag, free-form
``meta`` (configs, counters), and ``tensors``: name -> {dtype, shape,
offset} with offsets relative to the payload start.  Writing is fully
deterministic: tensors are laid out in sorted-name order, and the JSON is
emitted with sorted keys, so identical contents give identical bytes.
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


class ContainerError(ValueError):
    """Raised for malformed, truncated, or mismatched containers."""


def _dtype_code(arr: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if arr.dtype == dt:
            return code
    raise ContainerError(f"unsupported tensor dtype {arr.dtype}; use float32/float64")


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def write_container(path, kind: str, meta: dict, tensors: dict) -> None:
    """Write ``tensors`` (name -> ndarray) with manifest metadata to ``path``."""
    names = sorted(tensors)
    directory = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        code = _dtype_code(arr)
        directory[name] = {
            "dtype": code,
            "shape": list(arr.shape),
            "offset": offset,
        }
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        blobs.append(raw)
        offset += len(raw) + _pad(len(raw))

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": directory,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(b"\0" * _pad(f.tell()))
        for raw in blobs:
            f.write(raw)
            f.write(b"\0" * _pad(len(raw)))


def read_container(path) -> tuple[dict, dict]:
    """Read a container; returns (manifest, tensors as name -> ndarray)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a weight container")
    (header_len,) = struct.unpack_from("<Q", data, len(MAGIC))
    header_start = len(MAGIC) + 8
    header_end = header_start + header_len
    if header_end > len(data):
        raise ContainerError(f"{path}: truncated header")
    try:
        manifest = json.loads(data[header_start:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: unsupported format_version {manifest.get('format_version')}"
        )

    payload_start = header_end + _pad(header_end)
    tensors = {}
    for name, entry in manifest["tensors"].items():
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise ContainerError(f"{path}: tensor {name!r} has unknown dtype")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = payload_start + entry["offset"]
        end = start + count * dt.itemsize
        if end > len(data):
            raise ContainerError(f"{path}: tensor {name!r} extends past end of file")
        tensors[name] = np.frombuffer(data[start:end], dtype=dt).reshape(shape).copy()
    return manifest, tensors


def check_tensors(
    manifest_tensors: dict, expected: dict, *, context: str = "container"
) -> None:
    """Validate a loaded tensor dict against expected name -> shape.

    Rejects partial or over-full containers, naming the offending entry.
    """
    for name, shape in expected.items():
        if name not in manifest_tensors:
            raise ContainerError(f"{context}: missing tensor {name!r}")
        got = tuple(manifest_tensors[name].shape)
        if got != tuple(shape):
            raise ContainerError(
                f"{context}: tensor {name!r} has shape {got}, expected {tuple(shape)}"
            )
    extra = set(manifest_tensors) - set(expected)
    if extra:
        raise ContainerError(f"{context}: unexpected tensor {sorted(extra)[0]!r}")
