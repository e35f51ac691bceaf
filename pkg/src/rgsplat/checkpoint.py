"""Binary checkpoint container: magic "RSPL", version, JSON header, raw blobs.

The header carries the configs and a manifest of named parameter blobs
(name, shape, dtype, byte offset); payloads follow little-endian. Round
trips are bit-exact; version mismatches are rejected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RSPL"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        data = arr.astype(dtype, copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype.name),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    full_header = dict(header)
    full_header["params"] = manifest
    encoded = json.dumps(full_header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        for b in blobs:
            f.write(b)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} unsupported (want {FORMAT_VERSION})"
            )
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for entry in header.pop("params"):
        start = entry["offset"]
        raw = payload[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob for {entry['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return header, arrays
