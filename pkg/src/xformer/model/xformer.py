"""Full network assembly and parameter accounting."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import ops
from ..core.module import Module
from ..core.tensor import ShapeError, Tensor
from .blocks import Mv3Block, StageBridge
from .layers import ConvBN, Linear
from .spec import ModelSpec, Mv3Config, XfBlockConfig
from .trace import LayerRecord, Tracer


class Stage(Module):
    def __init__(self, blocks, channels: int, spec: ModelSpec, rng):
        mv3 = [b for b in blocks if isinstance(b, Mv3Config)]
        xf = [b for b in blocks if isinstance(b, XfBlockConfig)]
        self.mv3 = [Mv3Block(cfg, rng) for cfg in mv3]
        self.bridge = (
            StageBridge(channels, xf, spec.patch_size, spec.attention, spec.mhsa_heads, rng) if xf else None
        )

    def forward(self, x: Tensor) -> Tensor:
        for block in self.mv3:
            x = block(x)
        return x if self.bridge is None else self.bridge(x)

    def trace(self, tracer, in_shape):
        s = in_shape
        for block in self.mv3:
            s = block.trace(tracer, s)
        return s if self.bridge is None else self.bridge.trace(tracer, s)


class XFormer(Module):
    """Conv stem, MV3/XF stages, 1x1 conv, global average pool, linear classifier.

    Accepts ``(3, H, W)`` or ``(B, 3, H, W)`` and returns ``(classes,)`` or
    ``(B, classes)`` logits.
    """

    def __init__(self, spec: ModelSpec, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.stem = ConvBN(spec.in_channels, spec.stem_channels, 3, 2, act="silu", rng=rng)
        stage_blocks = spec.stage_blocks()
        self.stages = [Stage(blocks, st.out_channels, spec, rng) for blocks, st in zip(stage_blocks, spec.stages)]
        last = spec.stages[-1].out_channels
        self.head = ConvBN(last, spec.head_channels, 1, act="silu", rng=rng)
        self.classifier = Linear(spec.head_channels, spec.num_classes, bias=True, rng=rng)

    def features(self, x: Tensor) -> Tensor:
        if x.ndim not in (3, 4) or x.shape[-3] != self.spec.in_channels:
            raise ShapeError(f"expected ({self.spec.in_channels}, H, W) images, got {x.shape}")
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.head(x)

    def forward(self, x: Tensor) -> Tensor:
        f = self.features(x)
        lead, c = f.shape[:-3], f.shape[-3]
        pooled = ops.reshape(ops.mean(f, (-2, -1)), lead + (1, c))
        return ops.reshape(self.classifier(pooled), lead + (self.spec.num_classes,))

    def trace(self, resolution: Optional[int] = None, batch: int = 1) -> list[LayerRecord]:
        """Shape-only pass over every leaf layer at ``resolution``."""
        r = resolution or self.spec.resolution
        tracer = Tracer(self)
        shape = (batch, self.spec.in_channels, r, r) if batch > 1 else (self.spec.in_channels, r, r)
        s = self.stem.trace(tracer, shape)
        for stage in self.stages:
            s = stage.trace(tracer, s)
        s = self.head.trace(tracer, s)
        lead, c = tuple(s[:-3]), s[-3]
        tracer.emit(self, "pool", "pool", s, lead + (1, c))
        self.classifier.trace(tracer, lead + (1, c))
        return tracer.records


def build_xformer(spec: Optional[ModelSpec] = None, seed: int = 0) -> XFormer:
    """Instantiate a model with the deterministic initialization for ``seed``."""
    return XFormer(spec or ModelSpec(), np.random.default_rng(seed))


@dataclass
class ParamRow:
    name: str
    shape: tuple
    count: int
    group: str
    kind: str


@dataclass
class ParamAudit:
    rows: list
    total: int

    def by_group(self) -> "OrderedDict[str, int]":
        return self._sum("group")

    def by_kind(self) -> "OrderedDict[str, int]":
        return self._sum("kind")

    def _sum(self, attr: str) -> "OrderedDict[str, int]":
        out: OrderedDict[str, int] = OrderedDict()
        for row in self.rows:
            key = getattr(row, attr)
            out[key] = out.get(key, 0) + row.count
        return out


def _group(name: str) -> str:
    head = name.split(".")[0]
    if head == "stages":
        return f"stage{int(name.split('.')[1]) + 1}"
    return head


def _kind(name: str, ndim: int) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("w_q", "w_k", "w_v", "w_o"):
        return "attention projections"
    if leaf in ("w_c", "w_f", "temperature"):
        return "xfa kernels"
    if leaf in ("gamma", "beta"):
        return "norm affine"
    if leaf == "bias":
        return "biases"
    if ".bridge.local." in f".{name}":
        return "bridge local conv"
    if ".bridge.proj_" in f".{name}":
        return "bridge projections"
    return "conv weights" if ndim == 4 else "linear weights"


def count_params(model: Module) -> ParamAudit:
    """Exact learnable-parameter count per named tensor, grouped by top-level part.

    Running statistics are buffers and are not counted.
    """
    rows = [ParamRow(name, p.shape, int(p.size), _group(name), _kind(name, p.ndim))
            for name, p in model.named_parameters()]
    return ParamAudit(rows, int(sum(r.count for r in rows)))
