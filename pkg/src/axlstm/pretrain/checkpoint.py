"""Named-tensor container used for checkpoints and feature dumps.

Layout::

    b"AXLS" | uint32 version | uint64 metadata length | UTF-8 JSON metadata
    | zero padding to a 64-byte boundary | float32 payloads, each 64-byte aligned

The JSON holds caller metadata plus ``tensors``: a list of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the start
of the payload region. All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"AXLS"
FORMAT_VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class NameCollisionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, field_name: str, found, expected):
        self.field = field_name
        super().__init__(f"checkpoint {field_name}={found!r} does not match requested {field_name}={expected!r}")


@dataclass
class Checkpoint:
    metadata: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint, names: list[str] | None = None) -> None:
    """Write ``ckpt``. ``names`` optionally fixes the tensor order (duplicates are rejected)."""
    order = list(ckpt.tensors) if names is None else list(names)
    if len(set(order)) != len(order):
        dup = sorted({n for n in order if order.count(n) > 1})
        raise NameCollisionError(f"duplicate tensor names: {dup}")
    directory, payloads, offset = [], [], 0
    for name in order:
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")
        offset = _align(offset)
        directory.append({"name": name, "dtype": "float32", "shape": list(arr.shape),
                          "offset": offset, "nbytes": arr.nbytes})
        payloads.append((offset, arr.tobytes()))
        offset += arr.nbytes
    if "tensors" in ckpt.metadata:
        raise NameCollisionError("metadata key 'tensors' is reserved for the tensor directory")
    meta = json.dumps({**ckpt.metadata, "tensors": directory}, sort_keys=True).encode("utf-8")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta)) + meta
    data_start = _align(len(head))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(head)
        fh.write(b"\0" * (data_start - len(head)))
        pos = 0
        for off, raw in payloads:
            fh.write(b"\0" * (off - pos))
            fh.write(raw)
            pos = off + len(raw)
    os.replace(tmp, path)


def read_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < _HEADER.size:
        raise TruncatedCheckpointError(f"file is {len(buf)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, version, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    end = _HEADER.size + meta_len
    if len(buf) < end:
        raise TruncatedCheckpointError(f"metadata needs {meta_len} bytes, file ends after {len(buf) - _HEADER.size}")
    try:
        meta = json.loads(buf[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"metadata is not valid JSON: {err}") from err
    return meta, _align(end)


def load_checkpoint(path: str | os.PathLike, expect: dict | None = None) -> Checkpoint:
    """Read a container; nothing is returned unless every tensor is intact.

    ``expect`` maps encoder-config fields (e.g. ``{"d_m": 192}``) to required
    values; a mismatch raises :class:`ConfigMismatchError`.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    meta, data_start = read_header(buf)
    directory = meta.pop("tensors", [])
    tensors: dict[str, np.ndarray] = {}
    for entry in directory:
        name = entry["name"]
        if name in tensors:
            raise NameCollisionError(f"tensor {name!r} appears twice in the directory")
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {entry.get('dtype')!r}")
        start = data_start + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(buf):
            raise TruncatedCheckpointError(f"tensor {name!r} needs bytes {start}..{stop}, file has {len(buf)}")
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * 4 != entry["nbytes"]:
            raise CheckpointError(f"tensor {name!r}: shape {shape} disagrees with {entry['nbytes']} bytes")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=int(np.prod(shape)), offset=start) \
            .reshape(shape).astype(np.float32)
    if expect:
        enc = meta.get("encoder", {})
        for key, want in expect.items():
            if enc.get(key) != want:
                raise ConfigMismatchError(key, enc.get(key), want)
    return Checkpoint(meta, tensors)
