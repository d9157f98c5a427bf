"""EVPT tensor container and checkpoint manifests.

One record is, little-endian::

    b"EVPT" | version u32 | rank u32 | extents u32[rank] | dtype u8 | raw elements

dtype tag 0 is float32, 1 is float64.  A checkpoint is a concatenation of
records in ``<stem>.evpt`` plus ``<stem>.manifest.json`` mapping each tensor
name to its byte offset.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

MAGIC = b"EVPT"
VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {v: k for k, v in _TAGS.items()}


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr: np.ndarray) -> int:
    """Write one record; returns the number of bytes written."""
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", _TAGS[arr.dtype])
    body = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    f.write(header)
    f.write(body)
    return len(header) + len(body)


def read_tensor(f: BinaryIO) -> np.ndarray:
    start = f.tell()
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset {start}")
    version, rank = struct.unpack("<II", _exact(f, 8, start))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset {start}")
    shape = struct.unpack(f"<{rank}I", _exact(f, 4 * rank, start))
    (tag,) = struct.unpack("<B", _exact(f, 1, start))
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag} at offset {start}")
    dtype = _DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _exact(f, count * dtype.itemsize, start)
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)


def _exact(f: BinaryIO, n: int, start: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated record starting at offset {start}")
    return buf


def save_tensors(path, tensors: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as f:
        for arr in tensors:
            write_tensor(f, arr)


def load_tensors(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    f = io.BytesIO(data)
    out = []
    while f.tell() < len(data):
        out.append(read_tensor(f))
    return out


def checkpoint_paths(stem) -> tuple[Path, Path]:
    """``(<stem>.evpt, <stem>.manifest.json)``; a trailing suffix of either is ignored."""
    s = str(stem)
    for suffix in (".evpt", ".manifest.json"):
        if s.endswith(suffix):
            s = s[: -len(suffix)]
    return Path(s + ".evpt"), Path(s + ".manifest.json")


def save_checkpoint(stem, named: Mapping[str, np.ndarray], meta: dict | None = None) -> tuple[Path, Path]:
    blob, manifest = checkpoint_paths(stem)
    offsets = {}
    with open(blob, "wb") as f:
        for name, arr in named.items():
            offsets[name] = f.tell()
            write_tensor(f, arr)
    doc = {"format": "EVPT", "version": VERSION, "file": blob.name, "tensors": offsets,
           "meta": meta or {}}
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    return blob, manifest


def load_checkpoint(stem) -> tuple[dict[str, np.ndarray], dict]:
    _, manifest = checkpoint_paths(stem)
    doc = json.loads(manifest.read_text())
    blob = (manifest.parent / doc["file"]).read_bytes()
    f = io.BytesIO(blob)
    named = {}
    for name, offset in doc["tensors"].items():
        f.seek(offset)
        named[name] = read_tensor(f)
    return named, doc.get("meta", {})
