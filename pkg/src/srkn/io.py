"""Deterministic binary container for named arrays, plus model checkpoints.

The container is written field by field with fixed little-endian layouts
and sorted key order, so identical content always yields identical bytes
(archive formats with embedded timestamps would not). Layout:

    magic (8 bytes) | u32 version | u64 json length | meta JSON (utf-8)
    | u32 array count | entries

and each entry is

    u16 name length | name | u8 dtype code | u8 ndim | u64 dims... | raw C-order data.

A checkpoint is this container with the model config (and any caller
metadata) in the JSON block and the parameter tensors as entries;
optimizer slots ride along under ``opt.`` keys.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .model import ModelConfig, SRKN

MAGIC = b"SRKNARR\x01"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("float64"): 0,
    np.dtype("int64"): 1,
    np.dtype("uint8"): 2,
    np.dtype("bool"): 3,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays with a JSON metadata block; byte-deterministic."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float64)
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; returns (arrays, meta)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a container file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (meta_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            dtype = _CODE_DTYPES[code]
            data = f.read(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return arrays, meta


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, torch.Tensor]
    extra: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path, config: ModelConfig, state_dict: dict[str, torch.Tensor],
                    extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None):
    """Persist config + parameters (+ optional ``opt.``-style extras)."""
    arrays = {f"param.{k}": v.detach().cpu().numpy() for k, v in state_dict.items()}
    for k, v in (extra or {}).items():
        arrays[f"extra.{k}"] = np.asarray(v)
    full_meta = {
        "kind": "srkn-checkpoint",
        "model_config": config.to_dict(),
        "meta": meta or {},
    }
    write_arrays(path, arrays, full_meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, full_meta = read_arrays(path)
    if full_meta.get("kind") != "srkn-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(full_meta["model_config"])
    state = {
        name[len("param."):]: torch.from_numpy(arr)
        for name, arr in arrays.items() if name.startswith("param.")
    }
    extra = {
        name[len("extra."):]: arr
        for name, arr in arrays.items() if name.startswith("extra.")
    }
    return Checkpoint(config, state, extra, full_meta.get("meta", {}))


def build_model(checkpoint: Checkpoint) -> SRKN:
    """Instantiate the model a checkpoint describes and load its weights."""
    model = SRKN(checkpoint.config)
    model.load_state_dict(checkpoint.state)
    return model
