"""Weight checkpoint: JSON manifest followed by a raw float32 payload.

Byte layout::

    offset 0   8 bytes   magic b"S4DCKPT1"
    offset 8   8 bytes   header length H, unsigned little-endian
    offset 16  H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    16 + H     ...       payload: little-endian float32, row-major,
                         parameters concatenated in manifest order

The header holds ``{"params": [{"name", "shape", "offset"}...], "meta": {...}}``
where ``offset`` counts bytes from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"S4DCKPT1"


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"params": manifest, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode())
    payload = memoryview(blob)[16 + hlen:]
    arrays = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + 4 * count], dtype="<f4").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float32)
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
