"""MV3 and XF blocks, patch unfold/fold, and the conv-to-token stage bridge."""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Sequence

import numpy as np

from ..attention import AttentionConfig, build_attention
from ..core import ops
from ..core.module import Module
from ..core.tensor import ShapeError, Tensor
from .layers import ConvBN, LayerNorm, Linear, SqueezeExcite
from .spec import Mv3Config, XfBlockConfig


class Mv3Block(Module):
    """Inverted residual: 1x1 expand (SiLU) -> depthwise 3x3 (SiLU) -> SE ->
    1x1 project (linear). The input is added back when stride is 1 and the
    channel count is unchanged."""

    def __init__(self, cfg: Mv3Config, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        h = cfg.hidden
        self.expand = ConvBN(cfg.c_in, h, 1, act="silu", rng=rng)
        self.dw = ConvBN(h, h, cfg.kernel, cfg.stride, mode="depthwise", act="silu", rng=rng)
        self.se = SqueezeExcite(h, cfg.se_reduction, rng=rng)
        self.project = ConvBN(h, cfg.c_out, 1, act=None, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 3 or x.shape[-3] != self.cfg.c_in:
            raise ShapeError(f"MV3 block expects {self.cfg.c_in} input channels, got shape {x.shape}")
        y = self.project(self.se(self.dw(self.expand(x))))
        return ops.add(x, y) if self.cfg.residual else y

    def trace(self, tracer, in_shape):
        hold = tracer.hold(in_shape) if self.cfg.residual else contextlib.nullcontext()
        with hold:
            s = self.expand.trace(tracer, in_shape)
            s = self.dw.trace(tracer, s)
            s = self.se.trace(tracer, s)
            s = self.project.trace(tracer, s)
        if self.cfg.residual:
            tracer.emit(self, "residual", "add", s, s)
        return s


def mv3_block(cfg: Mv3Config, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
    return Mv3Block(cfg, rng)(x)


def unfold_patches(x: Tensor, p: int = 2) -> Tensor:
    """``(..., C, H, W)`` -> ``(..., N, p*p*C)`` non-overlapping patches.

    H and W are zero-padded on the bottom/right up to multiples of ``p``.
    Each patch is flattened in (row, col, channel) order and patches are
    numbered row-major over the patch grid.
    """
    c, h, w = x.shape[-3:]
    lead = x.shape[:-3]
    gh, gw = math.ceil(h / p), math.ceil(w / p)
    x = ops.pad2d(x, gh * p - h, gw * p - w)
    l = len(lead)
    t = ops.reshape(x, lead + (c, gh, p, gw, p))
    t = ops.permute(t, list(range(l)) + [l + 1, l + 3, l + 2, l + 4, l])
    return ops.reshape(t, lead + (gh * gw, p * p * c))


def fold_patches(t: Tensor, orig_h: int, orig_w: int, p: int = 2) -> Tensor:
    """Inverse of :func:`unfold_patches`, cropping any padding.

    Raises:
        ShapeError: if the token count or width does not fit the target size.
    """
    n, width = t.shape[-2:]
    lead = t.shape[:-2]
    gh, gw = math.ceil(orig_h / p), math.ceil(orig_w / p)
    if n != gh * gw:
        raise ShapeError(f"{n} tokens cannot fold into {orig_h}x{orig_w} with patch {p} (need {gh * gw})")
    if width % (p * p):
        raise ShapeError(f"token width {width} is not a multiple of patch area {p * p}")
    c = width // (p * p)
    l = len(lead)
    x = ops.reshape(t, lead + (gh, gw, p, p, c))
    x = ops.permute(x, list(range(l)) + [l + 4, l, l + 2, l + 1, l + 3])
    x = ops.reshape(x, lead + (c, gh * p, gw * p))
    return ops.crop2d(x, orig_h, orig_w)


class Mlp(Module):
    def __init__(self, d: int, hidden: int, rng=None):
        self.fc1 = Linear(d, hidden, bias=True, rng=rng)
        self.fc2 = Linear(hidden, d, bias=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))

    def trace(self, tracer, in_shape):
        s = self.fc1.trace(tracer, in_shape)
        tracer.emit(self, "gelu", "act", s, s)
        return self.fc2.trace(tracer, s)


class XfBlock(Module):
    """Pre-norm transformer block: ``x + Attn(LN(x))`` then ``x + MLP(LN(x))``.

    ``attention="xfa"`` uses cross feature attention; ``"mhsa"`` swaps in the
    softmax baseline with ``num_heads`` heads over the same projections.
    """

    def __init__(self, cfg: XfBlockConfig, attention: str = "xfa", num_heads: int = 4,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        if attention == "xfa":
            acfg = AttentionConfig("xfa", cfg.d_emb, cfg.d_qkv, n_train=cfg.n_train)
        else:
            acfg = AttentionConfig("mhsa", cfg.d_emb, cfg.d_qkv, num_heads=num_heads)
        self.attention_config = acfg
        self.ln1 = LayerNorm(cfg.d_emb)
        self.attn = build_attention(acfg, rng)
        self.ln2 = LayerNorm(cfg.d_emb)
        self.mlp = Mlp(cfg.d_emb, cfg.mlp_hidden, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[-1] != self.cfg.d_emb:
            raise ShapeError(f"XF block expects (..., N, {self.cfg.d_emb}) tokens, got {x.shape}")
        x = ops.add(x, self.attn(self.ln1(x)))
        return ops.add(x, self.mlp(self.ln2(x)))

    def trace(self, tracer, in_shape):
        acfg = self.attention_config
        with tracer.hold(in_shape):
            s = self.ln1.trace(tracer, in_shape)
            tracer.emit(self.attn, "", "attention", s, s, kind=acfg.kind, n=s[-2], d_emb=acfg.d_emb,
                        d_qkv=acfg.d_qkv, heads=acfg.num_heads or 1)
        tracer.emit(self, "residual1", "add", s, s)
        with tracer.hold(s):
            t = self.ln2.trace(tracer, s)
            t = self.mlp.trace(tracer, t)
        return tracer.emit(self, "residual2", "add", t, t)


def xf_block(cfg: XfBlockConfig, tokens: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
    return XfBlock(cfg, rng=rng)(tokens)


class StageBridge(Module):
    """Runs a stack of XF blocks on a feature map.

    3x3 conv + norm (local mixing, no activation) -> unfold into 2x2 patches ->
    bias-free linear ``p*p*C -> d_emb`` -> XF blocks -> bias-free linear back ->
    fold. The spatial shape and channel count are preserved.
    """

    def __init__(self, channels: int, blocks: Sequence[XfBlockConfig], patch: int = 2, attention: str = "xfa",
                 num_heads: int = 4, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        if not blocks:
            raise ValueError("a stage bridge needs at least one XF block")
        d = blocks[0].d_emb
        self.patch = patch
        self.channels = channels
        self.local = ConvBN(channels, channels, 3, act=None, rng=rng)
        self.proj_in = Linear(patch * patch * channels, d, bias=False, rng=rng)
        self.blocks = [XfBlock(cfg, attention, num_heads, rng=rng) for cfg in blocks]
        self.proj_out = Linear(d, patch * patch * channels, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        t = self.proj_in(unfold_patches(self.local(x), self.patch))
        for block in self.blocks:
            t = block(t)
        return fold_patches(self.proj_out(t), h, w, self.patch)

    def trace(self, tracer, in_shape):
        lead, (c, h, w) = tuple(in_shape[:-3]), in_shape[-3:]
        s = self.local.trace(tracer, in_shape)
        p = self.patch
        n = math.ceil(h / p) * math.ceil(w / p)
        tokens = tracer.emit(self, "unfold", "reshape", s, lead + (n, p * p * c))
        t = self.proj_in.trace(tracer, tokens)
        for block in self.blocks:
            t = block.trace(tracer, t)
        t = self.proj_out.trace(tracer, t)
        return tracer.emit(self, "fold", "reshape", t, in_shape)


def vit_stage_bridge(x: Tensor, bridge: StageBridge) -> Tensor:
    return bridge(x)
