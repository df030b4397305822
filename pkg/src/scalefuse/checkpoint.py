"""Single-blob checkpoint format.

Layout (all integers little-endian):
    magic "FSFM" | u32 format version | u64 config length | config JSON (UTF-8)
then, for every parameter in ascending name order:
    u64 name length | name bytes | u64 rank | u64 dims[rank] | f64 values

The config JSON is the ModelConfig dict with sorted keys, so identical
configs and parameters serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"FSFM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config_dict: dict, params: Dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<Q", len(cfg))
    blob += cfg
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode("utf-8")
        blob += struct.pack("<Q", len(nb))
        blob += nb
        blob += struct.pack("<Q", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<Q", d)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 8
    (cfg_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    config = json.loads(raw[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    params: Dict[str, np.ndarray] = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<Q", raw, off)
        off += 8
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<Q", raw, off)
        off += 8
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        params[name] = arr.astype(np.float64)
    return config, params
