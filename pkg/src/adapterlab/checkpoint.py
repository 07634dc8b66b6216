"""
Single-file checkpoints.

Layout::

    b"ALCKPT01"                      magic, 8 bytes
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON (sorted keys)
    parameter blocks                 raw little-endian float64, row-major

The header holds the model config, group membership and, per parameter, its
shape plus byte offset/length relative to the start of the block section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import SchemaError
from .model import Model, ModelConfig, _specs, group_of
from .tensor import Tensor

MAGIC = b"ALCKPT01"


def checkpoint_bytes(model: Model, groups: Iterable[str] | None = None) -> bytes:
    keep = None if groups is None else set(groups)
    names = [n for n in model.params if keep is None or group_of(n) in keep]
    entries, blocks, offset = [], [], 0
    for n in names:
        raw = np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes()
        entries.append({"name": n, "group": group_of(n), "shape": list(model.params[n].shape),
                        "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    group_map: dict[str, list[str]] = {}
    for e in entries:
        group_map.setdefault(e["group"], []).append(e["name"])
    header = json.dumps(
        {"format": "adapterlab-checkpoint", "version": 1, "config": model.config.to_dict(),
         "groups": group_map, "params": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blocks)


def save_checkpoint(model: Model, path, groups: Iterable[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, groups))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise SchemaError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["params"]:
        start = base + e["offset"]
        chunk = buf[start:start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise SchemaError(f"{path}: truncated block for {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return header, arrays


def load_checkpoint(path) -> Model:
    """Rebuild a model from a full checkpoint."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    expected = [n for n, _, _ in _specs(cfg)]
    missing = [n for n in expected if n not in arrays]
    if missing:
        raise SchemaError(f"{path}: partial checkpoint, missing {missing[:5]}; use load_into instead")
    return Model(cfg, {n: Tensor(arrays[n]) for n in expected})


def load_into(model: Model, path) -> list[str]:
    """Overwrite whichever parameters the checkpoint contains; return their names."""
    _, arrays = read_checkpoint(path)
    model.load_state_dict(arrays, strict=False)
    return list(arrays)
