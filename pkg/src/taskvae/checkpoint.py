"""Versioned binary checkpoints.

Layout::

    b"TVAECKPT"  magic (8 bytes)
    uint16       format version
    uint32       JSON header length
    JSON header  {"architecture": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    raw tensor bytes, little-endian, concatenated in header order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .models import VaeModel

MAGIC = b"TVAECKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


def save_checkpoint(model: VaeModel, path) -> int:
    """Write ``model``; returns the byte size of its trainable parameters."""
    state = model.state_dict()
    names = set(dict(model.named_parameters()))
    tensors, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append({
            "name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
            "offset": offset, "nbytes": len(raw), "parameter": name in names,
        })
        blobs.append(raw)
        offset += len(raw)
    param_bytes = sum(t["nbytes"] for t in tensors if t["parameter"])
    header = json.dumps({
        "architecture": model.architecture(),
        "parameter_bytes": param_bytes,
        "tensors": tensors,
    }, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return param_bytes


def read_header(path) -> dict:
    with Path(path).open("rb") as fh:
        magic, version, hlen = _PREFIX.unpack(fh.read(_PREFIX.size))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a taskvae checkpoint")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen))


def load_checkpoint(path) -> VaeModel:
    header = read_header(path)
    arch = header["architecture"]
    if arch.get("kind") != "vae":
        raise ValueError(f"unsupported architecture {arch.get('kind')!r}")
    model = VaeModel(arch["classes"], arch["latent_dim"], arch["leaky_slope"])
    data = Path(path).read_bytes()
    _, _, hlen = _PREFIX.unpack(data[:_PREFIX.size])
    base = _PREFIX.size + hlen
    state = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(data[start:start + t["nbytes"]], dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model
