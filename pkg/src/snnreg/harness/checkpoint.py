"""Checkpoint files.

Layout::

    b"SNRC" | u8 version | u64 header length | UTF-8 JSON header
    | float64 little-endian payload (arrays listed in the header, in order)
    | u32 CRC32 of everything before it

The header carries the run config, counters, optimizer/controller/gain state,
the bit-generator state and per-epoch history. Loading validates the whole
file before anything is reconstructed.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SNRC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    names = list(arrays)
    meta = dict(header)
    meta["arrays"] = [[n, list(np.shape(arrays[n]))] for n in names]
    head = json.dumps(meta, sort_keys=True).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<BQ", VERSION, len(head))
    body += head
    for n in names:
        body += np.ascontiguousarray(arrays[n], dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(data) < 4 + 9 + 4 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack_from("<BQ", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = 13 + hlen
    if len(data) < start + 4:
        raise CheckpointError(f"{path}: truncated header")
    try:
        meta = json.loads(data[13:start])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    shapes = [(n, tuple(s)) for n, s in meta.pop("arrays")]
    need = sum(8 * int(np.prod(s)) for _, s in shapes)
    if len(data) != start + need + 4:
        raise CheckpointError(f"{path}: truncated payload ({len(data) - start - 4} of {need} bytes)")
    (crc,) = struct.unpack_from("<I", data, start + need)
    if crc != zlib.crc32(data[: start + need]):
        raise CheckpointError(f"{path}: checksum mismatch")
    arrays, off = {}, start
    for n, s in shapes:
        size = int(np.prod(s))
        arrays[n] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(s).copy()
        off += 8 * size
    return meta, arrays
