"""Binary checkpoint format.

Header: magic ``PALM``, version u32, tensor count u32 (all little-endian).
Each tensor: name length u16, UTF-8 name, rows u32, cols u32, then rows*cols
f64 values in row-major order.  The model config is stored as JSON bytes
under the reserved name ``__config__`` with rows=1 and cols=byte length.
Vectors are written as 1 x n matrices.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .params import ModelParams, init_params

MAGIC = b"PALM"
VERSION = 1
CONFIG_NAME = "__config__"


class CheckpointError(ValueError):
    pass


def _entry(name: str, rows: int, cols: int, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols) + payload


def checkpoint_bytes(params: ModelParams, cfg: ModelConfig) -> bytes:
    config = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = sorted(params)
    out = [MAGIC, struct.pack("<II", VERSION, len(names) + 1), _entry(CONFIG_NAME, 1, len(config), config)]
    for name in names:
        arr = params[name].detach().numpy()
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        out.append(_entry(name, mat.shape[0], mat.shape[1], np.ascontiguousarray(mat, dtype="<f8").tobytes()))
    return b"".join(out)


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, cfg))


def parse_checkpoint(data: bytes) -> tuple[ModelParams, ModelConfig]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = None
    raw = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        if name == CONFIG_NAME:
            if rows != 1:
                raise CheckpointError("config entry must have rows=1")
            cfg = ModelConfig.from_dict(json.loads(bytes(take(cols)).decode("utf-8")))
            continue
        if name in raw:
            raise CheckpointError(f"duplicate tensor {name}")
        raw[name] = np.frombuffer(bytes(take(8 * rows * cols)), dtype="<f8").reshape(rows, cols)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    if cfg is None:
        raise CheckpointError("missing __config__ entry")
    template = init_params(cfg, 0)
    if set(template) != set(raw):
        missing = sorted(set(template) - set(raw))
        extra = sorted(set(raw) - set(template))
        raise CheckpointError(f"tensor names do not match the config (missing {missing}, extra {extra})")
    params = ModelParams()
    for name, ref in template.items():
        arr = raw[name]
        if arr.size != ref.numel():
            raise CheckpointError(f"{name}: {arr.size} values, expected {ref.numel()}")
        params[name] = torch.from_numpy(arr.reshape(tuple(ref.shape)).astype(np.float64)).requires_grad_(True)
    return params, cfg


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    return parse_checkpoint(Path(path).read_bytes())
