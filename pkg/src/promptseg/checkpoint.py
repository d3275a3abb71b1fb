"""Byte-deterministic checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
a sorted-key JSON header (config echo, vocabulary, parameter index), then
the raw little-endian parameter arrays in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, PromptSegmenter

MAGIC = b"PSEGCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(model: PromptSegmenter, path: str | Path, extra: dict | None = None) -> None:
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": VERSION,
        "model_config": model.cfg.to_dict(),
        "vocab": list(model.cfg.vocab),
        "extra": extra or {},
        "params": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
        for b in blobs:
            fh.write(b)


def read_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    header = json.loads(raw[20:20 + hlen])
    return header, raw[20 + hlen:]


def load_checkpoint(path: str | Path) -> tuple[PromptSegmenter, dict]:
    header, body = read_header(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = PromptSegmenter(cfg)
    state = {}
    for p in header["params"]:
        chunk = body[p["offset"]:p["offset"] + p["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype("<" + p["dtype"])).reshape(p["shape"])
        state[p["name"]] = torch.from_numpy(arr.copy())
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"{path}: parameter mismatch {sorted(missing)[:3]}")
    model.load_state_dict(state)
    model.eval()
    return model, header.get("extra", {})
