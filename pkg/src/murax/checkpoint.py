"""Binary checkpoint container for model parameters.

Layout (all integers little-endian)::

    b"MURX"
    u32   format version
    u32   header length in bytes
    ...   UTF-8 JSON header: {"config": ..., "tensors": [{name, shape, offset, count}], "meta": ...}
    ...   float32 arrays, in manifest order, offsets relative to the first array byte
    u32   CRC-32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from typing import Optional, Tuple

import numpy as np

from .model import DenseNetConfig, ModelParams, build

MAGIC = b"MURX"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def to_bytes(model: ModelParams, meta: Optional[dict] = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, t in model.named_tensors():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"config": model.config.to_dict(), "tensors": entries, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = MAGIC + _U32.pack(VERSION) + _U32.pack(len(header)) + header + b"".join(chunks)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save(model: ModelParams, path, meta: Optional[dict] = None) -> str:
    """Write atomically (temp file + rename); returns the SHA-256 of the bytes written."""
    blob = to_bytes(model, meta)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(blob).hexdigest()


def parse(blob: bytes) -> Tuple[dict, memoryview]:
    """Validate framing and CRC; returns (header, array payload)."""
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (stored_crc,) = _U32.unpack_from(blob, len(blob) - 4)
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual:
        raise CheckpointError(f"checkpoint CRC mismatch: stored {stored_crc:08x}, computed {actual:08x}")
    (version,) = _U32.unpack_from(blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = _U32.unpack_from(blob, 8)
    if 12 + hlen > len(blob) - 4:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(bytes(blob[12 : 12 + hlen]).decode("utf-8"))
    payload = memoryview(blob)[12 + hlen : len(blob) - 4]
    return header, payload


def from_bytes(blob: bytes, precision: str = "single") -> Tuple[ModelParams, dict]:
    header, payload = parse(blob)
    config = DenseNetConfig.from_dict(header["config"])
    model = build(config, seed=0, precision=precision)
    tensors = dict(model.named_tensors())
    listed = [e["name"] for e in header["tensors"]]
    if listed != list(tensors):
        missing = sorted(set(tensors) - set(listed))
        extra = sorted(set(listed) - set(tensors))
        raise CheckpointError(f"parameter manifest does not match config: missing {missing[:3]}, extra {extra[:3]}")
    for e in header["tensors"]:
        t = tensors[e["name"]]
        if tuple(e["shape"]) != t.shape or e["count"] != t.data.size:
            raise CheckpointError(f"{e['name']}: stored shape {e['shape']} vs expected {list(t.shape)}")
        end = e["offset"] + 4 * e["count"]
        if end > len(payload):
            raise CheckpointError(f"{e['name']}: array runs past end of payload")
        arr = np.frombuffer(payload[e["offset"] : end], dtype="<f4").reshape(t.shape)
        t.data[...] = arr
    return model, header.get("meta", {})


def load(path, precision: str = "single") -> Tuple[ModelParams, dict]:
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    try:
        return from_bytes(blob, precision)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def file_hash(path) -> str:
    with open(os.fspath(path), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
