"""Versioned binary container for named float64 arrays plus a JSON header.

Layout: ``MAGIC | u32 version | u64 header length | header JSON | payload | sha256``.
The header lists each array's name, shape and byte offset into the payload;
the trailing digest covers every preceding byte. Output is byte-for-byte
deterministic for equal inputs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MAECKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class ConfigMismatchError(CheckpointError):
    """A checkpoint was built for a different configuration."""


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 12 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen])
    payload = memoryview(body)[start + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write atomically; returns the hex digest of the file."""
    path = Path(path)
    blob = dumps(meta, arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
