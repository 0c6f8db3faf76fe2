"""Binary tensor container.

Layout (all integers little-endian)::

    b"USAD"  | u16 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype | u8 rank | rank x u32 dim | payload )

String metadata travels as uint8 tensors named ``meta/<key>``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"USAD"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}

META_PREFIX = "meta/"


class CheckpointError(ValueError):
    """Corrupt, truncated or otherwise unreadable container."""


def _tag_for(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    tags = {("f", 8): 0, ("f", 4): 1, ("i", 8): 2, ("u", 1): 3}
    if key not in tags:
        raise TypeError(f"unsupported dtype for checkpoint: {arr.dtype}")
    return tags[key]


def encode(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    items = dict(tensors)
    for key, text in (meta or {}).items():
        items[META_PREFIX + key] = np.frombuffer(str(text).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(items)))
    for name, arr in items.items():
        arr = np.asarray(arr)
        tag = _tag_for(arr)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} exceeds container limits")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated container: needed {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic: not a USAD container")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt tensor name: {exc}") from None
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(bytes(take(n * dtype.itemsize)), dtype=dtype).reshape(shape).copy()
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = arr.tobytes().decode("utf-8")
        else:
            tensors[name] = arr
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after last tensor ({len(view) - pos})")
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    blob = encode(tensors, meta)
    Path(path).write_bytes(blob)
    return blob


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode(Path(path).read_bytes())
