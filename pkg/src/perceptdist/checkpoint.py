"""Binary checkpoint container.

Layout::

    b"PNET" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The header carries arbitrary metadata plus a ``tensors`` manifest of
``{"name", "shape", "offset", "nbytes"}`` entries; offsets are relative to
the start of the payload, which holds little-endian float32 arrays in
manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PNET"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def write_container(path, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["tensors"] = entries
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic, not a checkpoint")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if 12 + hlen > len(blob):
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = blob[12 + hlen:]
    tensors = {}
    try:
        entries = header.pop("tensors")
        for e in entries:
            shape = tuple(int(s) for s in e["shape"])
            start, nbytes = int(e["offset"]), int(e["nbytes"])
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or start + nbytes > len(payload):
                raise CorruptCheckpointError(f"{path}: tensor {e['name']!r} truncated or malformed")
            arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
            tensors[e["name"]] = arr.reshape(shape).astype(np.float32)
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: malformed tensor manifest ({exc})") from None
    return header, tensors
