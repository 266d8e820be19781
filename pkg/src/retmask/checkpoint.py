"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"RMCKPT\\x00\\x00"
    4 bytes   uint32 format version
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header: config, tensor table, payload sha256, metadata
    ...       raw tensor bytes, concatenated in header order

The JSON header is written with sorted keys and no whitespace, so saving the
same params twice yields identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ModelParams, expected_shapes

MAGIC = b"RMCKPT\x00\x00"
FORMAT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _dtype_name(t: torch.Tensor) -> str:
    for k, v in _DTYPES.items():
        if t.dtype == v:
            return k
    raise CheckpointError(f"unsupported dtype {t.dtype}")


def to_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    table, chunks = [], []
    for name, t in params.tensors.items():
        arr = t.detach().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": _dtype_name(t), "shape": list(arr.shape)})
        chunks.append(data)
    payload = b"".join(chunks)
    header = {
        "config": params.config.to_dict(),
        "tensors": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + payload


def params_hash(params: ModelParams) -> str:
    return hashlib.sha256(to_bytes(params)).hexdigest()[:16]


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> str:
    """Write ``params`` to ``path``; returns the short content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = to_bytes(params, meta)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def from_bytes(blob: bytes, expected: ModelConfig | None = None) -> tuple[ModelParams, dict]:
    if len(blob) < 20:
        raise TruncatedCheckpointError("file shorter than the fixed header")
    if blob[:8] != MAGIC:
        raise VersionMismatchError("bad magic: not a checkpoint or corrupted header")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, reader supports {FORMAT_VERSION}")
    if len(blob) < 20 + hlen:
        raise TruncatedCheckpointError("file ends inside the JSON header")
    try:
        header = json.loads(blob[20:20 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VersionMismatchError(f"unreadable header: {e}") from e
    cfg = ModelConfig.from_dict(header["config"])
    payload = blob[20 + hlen:]
    need = sum(int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(e["dtype"]).itemsize
               for e in header["tensors"])
    if len(payload) < need:
        raise TruncatedCheckpointError(f"payload has {len(payload)} bytes, header declares {need}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")
    target = expected or cfg
    shapes = expected_shapes(target)
    names = [e["name"] for e in header["tensors"]]
    missing = [n for n in shapes if n not in names]
    extra = [n for n in names if n not in shapes]
    if missing or extra:
        raise ShapeMismatchError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    tensors, off = {}, 0
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        if shape != shapes[e["name"]]:
            raise ShapeMismatchError(
                f"tensor {e['name']!r} has shape {shape}, expected {shapes[e['name']]}")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        tensors[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    return ModelParams(target if expected is not None else cfg, tensors), header["meta"]


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelParams:
    """Read a checkpoint. With ``expected``, tensor shapes are checked against that config."""
    return from_bytes(Path(path).read_bytes(), expected)[0]


def load_checkpoint_meta(path) -> dict:
    return from_bytes(Path(path).read_bytes())[1]
