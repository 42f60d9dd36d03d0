"""Binary checkpoint: length-prefixed JSON manifest followed by float32 payload.

Layout::

    uint64 little-endian  manifest byte length
    manifest              UTF-8 JSON
    payload               concatenated little-endian float32 tensors
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    model_cfg: ModelConfig
    train_cfg: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None


def save_checkpoint(path, params: dict, model_cfg: ModelConfig, train_cfg=None, step=0,
                    epoch=0, rng_state=None) -> Path:
    index = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "len": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_cfg": model_cfg.to_dict(),
        "train_cfg": train_cfg or {},
        "step": int(step),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "crc32": zlib.crc32(payload),
        "tensor_index": index,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint: missing manifest length")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise CheckpointError("truncated checkpoint: manifest cut short")
    try:
        manifest = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version!r} (expected {FORMAT_VERSION})")
    payload = raw[8 + n :]
    index = manifest["tensor_index"]
    expected = sum(e["len"] for e in index)
    if len(payload) != expected:
        raise CheckpointError(
            f"truncated payload: index describes {expected} bytes, found {len(payload)}"
        )
    if zlib.crc32(payload) != manifest["crc32"]:
        raise CheckpointError("payload checksum mismatch (CRC32)")
    params = {}
    cursor = 0
    for e in index:
        if e["offset"] != cursor:
            raise CheckpointError(f"tensor {e['name']}: non-contiguous offset {e['offset']}")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if count * 4 != e["len"]:
            raise CheckpointError(f"tensor {e['name']}: shape {e['shape']} vs {e['len']} bytes")
        if e["name"] in params:
            raise CheckpointError(f"tensor {e['name']} listed twice")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=cursor)
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
        cursor += e["len"]
    return Checkpoint(
        params=params,
        model_cfg=ModelConfig.from_dict(manifest["model_cfg"]),
        train_cfg=manifest.get("train_cfg", {}),
        step=manifest.get("step", 0),
        epoch=manifest.get("epoch", 0),
        rng_state=manifest.get("rng_state"),
    )
