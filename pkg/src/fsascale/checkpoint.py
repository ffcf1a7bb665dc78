"""Versioned binary checkpoint of named float64 tensors.

Layout (all integers little-endian)::

    magic    8 bytes   b"FSACKPT\\0"
    version  uint32    currently 1
    hlen     uint64    length of the JSON header in bytes
    header   hlen      UTF-8 JSON: {"meta": {...}, "sha256": hex,
                                    "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    payload  ...       float64 little-endian data, tensors back to back

The payload hash guards against truncation and bit rot. Writing is a pure
function of the inputs, so identical models give identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSACKPT\x00"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps(
        {"meta": meta or {}, "sha256": hashlib.sha256(payload).hexdigest(), "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:8] != MAGIC or len(raw) < 20:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = raw[20 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (file truncated or corrupt)")
    state = {}
    for e in header["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        state[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return state, header["meta"]
