"""Checkpoint file: magic, JSON header, then raw little-endian tensors.

Layout::

    b"JMVRCKPT" | u32 version | u64 header length | header (UTF-8 JSON) | data

The header lists every tensor as {name, dtype, shape, offset, nbytes} with
offsets relative to the start of the data section, plus the config hashes,
step count and schedule constants. Nothing time-dependent is written, so
identical runs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

MAGIC = b"JMVRCKPT"
VERSION = 1
_DTYPES = {torch.float64: "<f8", torch.float32: "<f4", torch.int64: "<i8", torch.bool: "|b1"}


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], header: dict) -> None:
    tensors, chunks, offset = [], [], 0
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise DataError(f"unsupported dtype {t.dtype} for {name}")
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes()
        tensors.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": tensors}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(head)))
        f.write(head)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not a JMVR checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    state = {}
    for t in header["tensors"]:
        buf = data[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    return state, header


def check_compatible(header: dict, model_hash: str) -> None:
    if header.get("model_hash") != model_hash:
        raise ConfigError(
            f"checkpoint model hash {header.get('model_hash')} does not match config {model_hash}")
