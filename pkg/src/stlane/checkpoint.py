"""Binary checkpoint format.

Layout::

    b"STLANE01"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 text, newline separated
    payload                          little-endian float32 blobs

Manifest lines::

    config variant=st extractor=lstm frames=5 ...
    param <name> <d0,d1,...> <byte offset into payload>

Parameters appear in manifest order and the payload is their concatenation.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, init_parameters
from .nn import ParamStore, Parameter

MAGIC = b"STLANE01"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


class IncompleteCheckpointError(CheckpointError):
    pass


def to_bytes(params: ParamStore, config: ModelConfig) -> bytes:
    lines = ["config " + " ".join(f"{k}={v}" for k, v in config.to_dict().items())]
    blobs = []
    offset = 0
    for p in params:
        blob = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
        shape = ",".join(str(d) for d in p.value.shape)
        lines.append(f"param {p.name} {shape} {offset}")
        blobs.append(blob)
        offset += len(blob)
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    return MAGIC + _LEN.pack(len(manifest)) + manifest + b"".join(blobs)


def save_checkpoint(params: ParamStore, config: ModelConfig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(params, config))
    os.replace(tmp, path)


def from_bytes(data: bytes) -> tuple[ParamStore, ModelConfig]:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic: not an STLANE01 checkpoint")
    head = len(MAGIC) + _LEN.size
    if len(data) < head:
        raise TruncatedCheckpointError("truncated header")
    (mlen,) = _LEN.unpack_from(data, len(MAGIC))
    if len(data) < head + mlen:
        raise TruncatedCheckpointError("truncated manifest")
    try:
        manifest = data[head:head + mlen].decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"manifest is not UTF-8: {exc}") from exc
    payload = memoryview(data)[head + mlen:]

    if not manifest or not manifest[0].startswith("config "):
        raise CheckpointError("manifest lacks a config line")
    cfg_items = dict(item.split("=", 1) for item in manifest[0].split()[1:])
    config = ModelConfig.from_dict(cfg_items)
    reference = init_parameters(config, 0)
    expected = reference.names()
    expected_set = set(expected)

    store = ParamStore()
    for line in manifest[1:]:
        parts = line.split()
        if len(parts) != 4 or parts[0] != "param":
            raise CheckpointError(f"malformed manifest line: {line!r}")
        _, name, shape_s, offset_s = parts
        if name not in expected_set:
            raise UnknownParameterError(f"unknown parameter {name!r} for {config.name}")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        if shape != reference.value(name).shape:
            raise CheckpointError(f"parameter {name} has shape {shape}, expected {reference.value(name).shape}")
        offset = int(offset_s)
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise TruncatedCheckpointError(f"truncated payload: parameter {name} needs bytes "
                                           f"{offset}..{offset + nbytes}, payload has {len(payload)}")
        value = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
        store.add(Parameter(name, value))
    missing = [n for n in expected if n not in store]
    if missing:
        layer = missing[0].split(".")[0]
        raise IncompleteCheckpointError(f"checkpoint incomplete: missing layer {layer} ({', '.join(missing)})")
    ordered = ParamStore([store[n] for n in expected])
    return ordered, config


def load_checkpoint(path) -> tuple[ParamStore, ModelConfig]:
    return from_bytes(Path(path).read_bytes())
