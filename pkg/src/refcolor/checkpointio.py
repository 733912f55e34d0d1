"""Repo-wide checkpoint format.

Layout: 8-byte magic, uint32 LE version, uint64 LE header length, UTF-8 JSON
header (config plus an ordered name/shape table), then one little-endian
float32 buffer per named parameter, in table order.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import DataError, DependencyError

MAGIC = b"REFCKPT1"
VERSION = 1


def save_checkpoint(path, config: dict, params: "OrderedDict[str, np.ndarray]"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    buffers = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        table.append([name, list(arr.shape)])
        buffers.append(arr.tobytes())
    header = json.dumps({"version": VERSION, "config": config, "params": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def read_header(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise DataError(f"bad checkpoint magic in {path}: {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version} in {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    header = read_header(path)
    params = OrderedDict()
    offset = 8 + 4 + 8 + len(json.dumps(header, sort_keys=True,
                                        separators=(",", ":")).encode("utf-8"))
    with path.open("rb") as fh:
        fh.seek(offset)
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise DataError(f"truncated checkpoint buffer for {name!r} in {path}")
            params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return header["config"], params


def save_module(path, config: dict, module) -> None:
    """Persist a torch module's state dict in the shared format."""
    state = OrderedDict((k, v.detach().cpu().numpy()) for k, v in module.state_dict().items())
    save_checkpoint(path, config, state)


def load_into_module(path, module) -> dict:
    """Load a checkpoint's buffers into a torch module; returns the config."""
    import torch

    config, params = load_checkpoint(path)
    state = OrderedDict((k, torch.from_numpy(v)) for k, v in params.items())
    module.load_state_dict(state)
    return config
