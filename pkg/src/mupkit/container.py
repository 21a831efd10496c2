"""Versioned binary container for named float tensors.

Wire layout (all integers little-endian uint32):

    magic    4 bytes  b"MUPC"
    version  u32      currently 1
    meta_len u32      followed by meta_len bytes of UTF-8 JSON metadata
    n_tensors u32
    per tensor:
        name_len u32, name bytes (UTF-8)
        ndim u32, then ndim dimension sizes (u32 each)
        payload: prod(dims) float64 values, row-major, little-endian
    sha256   32 bytes over everything preceding it

The metadata block makes containers self-describing (a model file carries
its own architecture, a dataset file its split sizes). Integer-valued
tensors such as labels are stored as float64; callers cast on load.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"MUPC"
VERSION = 1

_U32 = struct.Struct("<I")


class ContainerError(Exception):
    """Base class for malformed container data."""


class TruncatedContainer(ContainerError):
    pass


class VersionMismatch(ContainerError):
    pass


class ChecksumMismatch(ContainerError):
    pass


def pack(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize metadata and named float64 tensors into container bytes."""
    parts = [MAGIC, _U32.pack(VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(_U32.pack(len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(_U32.pack(len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_bytes = name.encode("utf-8")
        parts.append(_U32.pack(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_U32.pack(arr.ndim))
        for dim in arr.shape:
            parts.append(_U32.pack(dim))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def unpack(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse container bytes back into (meta, tensors).

    Raises TruncatedContainer / VersionMismatch / ChecksumMismatch on any
    corruption; never returns a silently wrong payload.
    """
    if len(data) < len(MAGIC) + 4 + 32:
        raise TruncatedContainer(f"container too short ({len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic; not a container file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("sha256 checksum does not match payload")

    pos = len(MAGIC)

    def read_u32() -> int:
        nonlocal pos
        if pos + 4 > len(body):
            raise TruncatedContainer("unexpected end of container")
        (value,) = _U32.unpack_from(body, pos)
        pos += 4
        return value

    def read_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedContainer("unexpected end of container")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    version = read_u32()
    if version != VERSION:
        raise VersionMismatch(f"container version {version}, expected {VERSION}")
    meta = json.loads(read_bytes(read_u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(read_u32()):
        name = read_bytes(read_u32()).decode("utf-8")
        ndim = read_u32()
        shape = tuple(read_u32() for _ in range(ndim))
        count = 1
        for dim in shape:
            count *= dim
        payload = read_bytes(count * 8)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if pos != len(body):
        raise ContainerError(f"{len(body) - pos} trailing bytes after last tensor")
    return meta, tensors


def write_file(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(meta, tensors))


def read_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return unpack(fh.read())


def fingerprint(data: bytes) -> str:
    """Hex digest used to stamp reports with the exact artifact versions."""
    return hashlib.sha256(data).hexdigest()
