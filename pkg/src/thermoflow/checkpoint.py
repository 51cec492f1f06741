"""Single-file tensor checkpoint container.

Layout (stable; see README "Checkpoint container format"):

    bytes 0..7    magic ``b"TFLOWCK1"``
    bytes 8..15   little-endian uint64: byte length M of the manifest
    bytes 16..    UTF-8 JSON manifest, no trailing newline
    bytes 16+M..  payload: raw little-endian float64 runs, concatenated

The manifest is ``{"schema": 1, "meta": {...}, "tensors": {name:
{"shape": [...], "offset": O}}}`` with tensor names sorted and offsets
counted in bytes from the start of the payload.  Serialization is fully
deterministic: identical tensors and meta produce identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"TFLOWCK1"
SCHEMA = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON-serializable meta block."""
    names = sorted(tensors)
    manifest: dict = {"schema": SCHEMA, "meta": meta or {}, "tensors": {}}
    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        manifest["tensors"][name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.astype("<f8", copy=False).tobytes()
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; returns (tensors, meta)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise DataError(f"{path} is not a thermoflow checkpoint (bad magic {magic!r})")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        if manifest.get("schema") != SCHEMA:
            raise DataError(f"unsupported checkpoint schema {manifest.get('schema')} in {path}")
        payload = f.read()
    tensors = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return tensors, manifest["meta"]
