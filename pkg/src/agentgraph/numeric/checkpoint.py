"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"AGCKPT\\x00\\x01"
    bytes 8..11   uint32 format version
    bytes 12..19  uint64 manifest length M
    next M bytes  manifest, UTF-8 JSON
    remainder     one block per manifest entry, in manifest order:
                  row-major float64 ('<f8') values, prod(shape) * 8 bytes

The manifest holds ``format_version``, ``hyperparameters``, ``extra`` (free
JSON metadata) and ``tensors``: a list of ``{"name", "shape", "kind"}``
where kind is ``param`` or ``buffer``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from agentgraph.errors import CheckpointError

MAGIC = b"AGCKPT\x00\x01"
FORMAT_VERSION = 1


def save(
    path: str | os.PathLike,
    tensors: dict[str, np.ndarray],
    hyperparameters: dict,
    kinds: dict[str, str] | None = None,
    extra: dict | None = None,
) -> None:
    kinds = kinds or {}
    entries = []
    blocks = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "kind": kinds.get(name, "param")})
        blocks.append(arr.tobytes(order="C"))
    manifest = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": hyperparameters,
        "extra": extra or {},
        "tensors": entries,
    }
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for block in blocks:
            fh.write(block)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<IQ", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 20
    manifest = json.loads(buf[start : start + mlen].decode("utf-8"))
    offset = start + mlen
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(buf):
            raise CheckpointError("checkpoint truncated", [entry["name"]])
        arrays[entry["name"]] = (
            np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
            .reshape(entry["shape"])
            .astype(np.float64)
        )
        offset = end
    if offset != len(buf):
        raise CheckpointError("trailing bytes after last tensor block")
    return manifest, arrays
