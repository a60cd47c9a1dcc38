"""Binary weight archive.

Layout (all integers little-endian u32)::

    b"XFW1" | version | count | count x entry
    entry = name_len | name (UTF-8) | rank | rank x dim | prod(dims) x f32 (LE)

Entries are the model's state in its fixed enumeration order: learnable
parameters followed by normalization running statistics.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from ..core.module import Module

MAGIC = b"XFW1"
VERSION = 1
_U32 = struct.Struct("<I")


class ArchiveError(ValueError):
    """Malformed, truncated or over-long archive data."""


class ArchiveMismatch(ValueError):
    """Archive contents do not fit the model. ``name`` is the first offending entry."""

    def __init__(self, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.name = name


def dumps(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(state))]
    for name, value in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = memoryview(data), 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise ArchiveError(f"truncated archive: need {n} bytes for {what} at offset {self.pos}, "
                               f"{len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def loads(data: bytes) -> "OrderedDict[str, np.ndarray]":
    """Parse archive bytes into float32 arrays.

    Raises:
        ArchiveError: on bad magic, unsupported version, truncation, duplicate
            names or trailing bytes. Nothing is returned on error.
    """
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise ArchiveError("not a weight archive (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    count = r.u32("entry count")
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        name = bytes(r.take(r.u32(f"name length of entry {i}"), f"name of entry {i}")).decode("utf-8")
        if name in state:
            raise ArchiveError(f"duplicate entry {name!r}")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"dims of {name}") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        buf = r.take(4 * n, f"data of {name}")
        state[name] = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.data):
        raise ArchiveError(f"{len(r.data) - r.pos} trailing bytes after {count} entries")
    return state


def save_archive(model: Union[Module, Mapping[str, np.ndarray]], path) -> None:
    state = model.state_dict() if isinstance(model, Module) else model
    Path(path).write_bytes(dumps(state))


def load_archive(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def load_into(model: Module, state: Mapping[str, np.ndarray]) -> None:
    """Copy ``state`` into ``model`` after checking every name and shape.

    Raises:
        ArchiveMismatch: naming the first entry (in model order) that is
            missing or has the wrong shape, or the first unexpected entry.
            The model is not modified in that case.
    """
    expected = model.state_dict()
    for name, value in expected.items():
        if name not in state:
            raise ArchiveMismatch(name, "missing from archive")
        if tuple(state[name].shape) != tuple(value.shape):
            raise ArchiveMismatch(name, f"archive shape {tuple(state[name].shape)} != model shape {tuple(value.shape)}")
    for name in state:
        if name not in expected:
            raise ArchiveMismatch(name, "not a parameter of this model")
    model.load_state_dict(dict(state))
