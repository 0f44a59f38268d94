"""Versioned binary container for parameters, optimizer state, and metadata.

Layout: magic ``GWAE``, format version u32 little-endian, then one
record per named array: name length u16, name bytes (utf-8), rank u8,
extents as u64 little-endian, data as float64 little-endian.  Metadata
(config echo, epoch, counters) rides along as a reserved ``__meta/json``
entry whose float values are the raw JSON bytes.  Round trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GWAE"
VERSION = 1
META_KEY = "__meta/json"


class CheckpointFormatError(ValueError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointFormatError(f"parameter name too long: {name!r}")
        buf += struct.pack("<H", len(name_b))
        buf += name_b
        buf += struct.pack("<B", data.ndim)
        for extent in data.shape:
            buf += struct.pack("<Q", extent)
        buf += data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic at offset 0: {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(raw):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", raw, pos) if rank else ()
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 8 * count
            if end > len(raw):
                raise struct.error("truncated data")
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).copy()
            pos = end
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"truncated or corrupt record at offset {pos}: {exc}")
        out[name] = arr.reshape(shape)
    return out


def _meta_to_array(meta: dict) -> np.ndarray:
    payload = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.float64)


def _meta_from_array(arr: np.ndarray) -> dict:
    return json.loads(bytes(arr.astype(np.uint8)).decode("utf-8"))


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    full = dict(arrays)
    full[META_KEY] = _meta_to_array(meta)
    write_arrays(path, full)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = read_arrays(path)
    meta = {}
    if META_KEY in arrays:
        meta = _meta_from_array(arrays.pop(META_KEY))
    return arrays, meta
