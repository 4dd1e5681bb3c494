"""Self-describing binary container for named float64 arrays.

Layout::

    MAGIC (12 bytes) | header length (uint64 LE) | header JSON (UTF-8) | data

The header holds caller metadata plus, per tensor, its name, shape and byte
offset into the data block. Arrays are written little-endian float64 in
insertion order. Nothing time- or host-dependent is stored, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError

MAGIC = b"AUTOFT-CKPT1"


def dumps(meta: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if not buf.startswith(MAGIC):
        raise ConfigError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(buf, dtype="<f8", count=e["nbytes"] // 8, offset=start)
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return header["meta"], tensors


def save(path: str | Path, meta: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, tensors))


def load(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(buf)


def tensor_digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
