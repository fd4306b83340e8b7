"""Single-file binary checkpoints.

Layout (little-endian)::

    b"BAPT" | u32 version | u64 header length | UTF-8 JSON header
    | float64 tensor payloads in manifest order | u32 CRC32 of all preceding bytes

The JSON header carries the training config, model config, vocabulary, the
tensor manifest (name, shape, byte offset into the payload section), counters,
Adam step count and the generator state.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

MAGIC = b"BAPT"
VERSION = 1


class CheckpointError(Exception):
    """Unreadable, corrupted or incompatible checkpoint."""


class VersionMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: Dict
    model_config: Dict
    vocab: List[str]
    params: Dict[str, np.ndarray]
    adam_t: int = 0
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: Optional[Dict] = None
    extra: Dict = field(default_factory=dict)
    version: int = VERSION


def _tensors(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        yield "param/" + name, arr
    for name, arr in ckpt.adam_m.items():
        yield "adam_m/" + name, arr
    for name, arr in ckpt.adam_v.items():
        yield "adam_v/" + name, arr


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest, payloads, offset = [], [], 0
    for name, arr in _tensors(ckpt):
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(blob)
        offset += len(blob)
    header = {
        "format": "nlvr-pointer",
        "config": ckpt.config,
        "model_config": ckpt.model_config,
        "vocab": ckpt.vocab,
        "tensors": manifest,
        "adam_t": ckpt.adam_t,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join([MAGIC, struct.pack("<IQ", VERSION, len(head)), head, *payloads])
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic or truncated)")
    version, head_len = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated file)")
    start = 16
    try:
        header = json.loads(body[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    payload = body[start + head_len :]
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        kind, name = entry["name"].split("/", 1)
        groups[kind][name] = arr.astype(np.float64).reshape(shape)
    return Checkpoint(
        config=header["config"],
        model_config=header["model_config"],
        vocab=header["vocab"],
        params=groups["param"],
        adam_t=header["adam_t"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        epoch=header["epoch"],
        step=header["step"],
        rng_state=header["rng_state"],
        extra=header.get("extra", {}),
        version=version,
    )
