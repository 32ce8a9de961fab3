"""Binary checkpoint container with named blocks of float32 tensors.

Layout (little-endian)::

    magic  b"VCKP"   4 bytes
    version          u16
    reserved         u16 (0)
    index length     u32
    index            UTF-8 JSON: config_hash and, per block, its meta dict and
                     an ordered list of [tensor name, shape]
    tensor data      raw f32 values in index order
    digest           32-byte sha256 of everything above

Blocks used by the pipeline: "ae", "ldm", "extractor", "conditioning".
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VCKP"
VERSION = 1
_HEAD = struct.Struct("<4sHHI")
_DIGEST = 32


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


@dataclass
class Block:
    meta: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class CheckpointContainer:
    config_hash: str
    blocks: dict[str, Block] = field(default_factory=dict)

    def block(self, name: str) -> Block:
        try:
            return self.blocks[name]
        except KeyError:
            raise CheckpointError(f"checkpoint has no block {name!r} (blocks: {sorted(self.blocks)})") from None

    def add(self, name: str, tensors: dict[str, np.ndarray], **meta) -> Block:
        blk = Block(dict(meta), {k: np.asarray(v, dtype="<f4") for k, v in tensors.items()})
        self.blocks[name] = blk
        return blk


def to_bytes(container: CheckpointContainer) -> bytes:
    index = {"config_hash": container.config_hash, "blocks": []}
    chunks = []
    for name, blk in container.blocks.items():
        entries = []
        for tname, arr in blk.tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            entries.append([tname, list(arr.shape)])
            chunks.append(arr.tobytes())
        index["blocks"].append({"name": name, "meta": blk.meta, "tensors": entries})
    idx = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    body = _HEAD.pack(MAGIC, VERSION, 0, len(idx)) + idx + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> CheckpointContainer:
    if len(data) < _HEAD.size + _DIGEST:
        raise CorruptCheckpoint(f"checkpoint too short ({len(data)} bytes)")
    magic, version, _, idx_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, this build reads {VERSION}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("digest mismatch (truncated or modified file)")
    try:
        index = json.loads(body[_HEAD.size : _HEAD.size + idx_len])
    except ValueError as exc:
        raise CorruptCheckpoint(f"unreadable index: {exc}") from exc
    pos = _HEAD.size + idx_len
    container = CheckpointContainer(index["config_hash"])
    for b in index["blocks"]:
        tensors = {}
        for tname, shape in b["tensors"]:
            n = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + n > len(body):
                raise CorruptCheckpoint(f"tensor {b['name']}/{tname} runs past the end of the file")
            tensors[tname] = np.frombuffer(body, dtype="<f4", count=n // 4, offset=pos).reshape(shape).copy()
            pos += n
        container.blocks[b["name"]] = Block(b["meta"], tensors)
    if pos != len(body):
        raise CorruptCheckpoint(f"{len(body) - pos} trailing bytes after tensor data")
    return container


def save_checkpoint(container: CheckpointContainer, path) -> None:
    """Write atomically through a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(container))
    os.replace(tmp, path)


def load_checkpoint(path) -> CheckpointContainer:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
