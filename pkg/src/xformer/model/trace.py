"""Symbolic shape propagation through a model.

Modules implement ``trace(tracer, in_shape) -> out_shape`` and emit one
:class:`LayerRecord` per leaf computation. The profiler turns records into
FLOP and activation counts; the CLI uses them for the layer table.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


@dataclass
class LayerRecord:
    name: str
    op: str
    in_shape: tuple
    out_shape: tuple
    meta: dict = field(default_factory=dict)
    held: int = 0  # residual elements kept alive while this layer runs

    @property
    def in_elements(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_elements(self) -> int:
        return int(np.prod(self.out_shape))


class Tracer:
    def __init__(self, root):
        self.names = {id(m): name for name, m in root.named_modules()}
        self.records: list[LayerRecord] = []
        self._held: list[int] = []

    def emit(self, module, suffix: str, op: str, in_shape, out_shape, **meta) -> tuple:
        base = self.names.get(id(module), "?")
        name = ".".join(p for p in (base, suffix) if p)
        self.records.append(LayerRecord(name, op, tuple(in_shape), tuple(out_shape), meta, sum(self._held)))
        return tuple(out_shape)

    @contextlib.contextmanager
    def hold(self, shape) -> Iterator[None]:
        self._held.append(int(np.prod(shape)))
        try:
            yield
        finally:
            self._held.pop()
