"""Binary checkpoints: magic, version byte, JSON header, little-endian float64 payloads.

Layout::

    b"EQCK" | version (1 byte) | header length (uint32 LE) | header (UTF-8 JSON)
    | payload of every parameter in header order, '<f8', row-major

The header lists the architecture descriptor, metadata and, per parameter,
its name, shape and byte length.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import VAEModel

MAGIC = b"EQCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _jsonable(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        out[k] = v
    return out


def checkpoint_bytes(model: VAEModel) -> bytes:
    names = sorted(model.params)
    entries = []
    payload = []
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "bytes": arr.nbytes})
        payload.append(arr.tobytes())
    header = {"architecture": model.descriptor(), "meta": _jsonable(model.meta), "params": entries}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(hb)) + hb + b"".join(payload)


def save_checkpoint(model: VAEModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def model_from_bytes(data: bytes) -> VAEModel:
    if len(data) < 9 or data[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    if data[4] != VERSION:
        raise CheckpointVersionError(f"checkpoint version {data[4]} is not supported (expected {VERSION})")
    (hlen,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + hlen:
        raise CorruptCheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from None
    offset = 9 + hlen
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(entry["bytes"])
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"parameter {entry['name']}: length does not match its shape")
        if offset + nbytes > len(data):
            raise CorruptCheckpointError(f"parameter {entry['name']}: payload truncated")
        params[entry["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                              offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CorruptCheckpointError("trailing bytes after the last parameter")
    arch = dict(header["architecture"])
    arch["channels"] = tuple(arch["channels"])
    model = VAEModel(**arch)
    return model.with_params(params, **header.get("meta", {}))


def load_checkpoint(path) -> VAEModel:
    return model_from_bytes(Path(path).read_bytes())
