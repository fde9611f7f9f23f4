"""Self-describing binary container used for datasets, checkpoints and stores.

Layout (all integers little-endian)::

    offset 0   magic        8 bytes   b"DMUCNT01"
    offset 8   header_len   uint64
    offset 16  header       header_len bytes of UTF-8 JSON (sorted keys)
    ...        payload      arrays back to back, in header["arrays"] order

Each entry of ``header["arrays"]`` is ``{"name", "dtype", "shape"}`` where
dtype is ``"<f8"`` (float64) or ``"<i8"`` (int64). The remaining header keys
are free-form metadata. Writing the same content twice yields identical
bytes: no timestamps, sorted JSON keys, fixed dtypes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"DMUCNT01"
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class ContainerError(IOError):
    pass


def write_container(path: str | Path, kind: str, meta: dict[str, Any],
                    arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "<f8" if arr.dtype.kind == "f" else "<i8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        entries.append({"name": name, "dtype": code, "shape": list(data.shape)})
        blobs.append(data.tobytes(order="C"))
    header = dict(meta)
    header["kind"] = kind
    header["arrays"] = entries
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path, kind: str | None = None):
    """Return ``(meta, arrays)``; raises ContainerError on a malformed file."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, got {header.get('kind')!r}")
    pos = 16 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * dt.itemsize
        if pos + nbytes > len(buf):
            raise ContainerError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape).copy()
        pos += nbytes
    return header, arrays
