"""Flat named-tensor checkpoint container.

Layout (all integers little-endian):

    bytes 0-3    magic ``FFCK``
    bytes 4-7    format version (uint32, currently 1)
    bytes 8-11   tensor count (uint32)
    bytes 12-15  reserved (uint32, zero)

followed by one record per tensor:

    uint32 name length, UTF-8 name, uint32 ndim, int64 dims..., float64 data.
"""

from __future__ import annotations

import struct

import numpy as np
import torch

from .errors import ConfigError

MAGIC = b"FFCK"
VERSION = 1


def save_checkpoint(module: torch.nn.Module, path):
    state = module.state_dict()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<III", VERSION, len(state), 0))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path) -> dict:
    """Read a checkpoint into a {name: float64 ndarray} dict."""
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
        version, count, _reserved = struct.unpack("<III", header[4:])
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{ndim}q", f.read(8 * ndim)) if ndim else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8")
            if data.size != n:
                raise ConfigError(f"{path}: truncated tensor {name!r}")
            out[name] = data.reshape(dims).astype(np.float64)
    return out


def load_checkpoint(module: torch.nn.Module, path):
    """Load a checkpoint into a module; names and shapes must match exactly."""
    tensors = read_checkpoint(path)
    state = module.state_dict()
    if set(tensors) != set(state):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise ConfigError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise ConfigError(
                f"{path}: {name!r} has shape {arr.shape}, expected {tuple(state[name].shape)}"
            )
    module.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
