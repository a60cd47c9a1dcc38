"""Parameterized layers: linear, layer/batch normalization, conv+norm, SE."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..core import ops
from ..core.module import Module
from ..core.tensor import Parameter, Tensor, get_default_dtype

LINEAR_STD = 0.02


def _array(values) -> np.ndarray:
    return np.asarray(values, dtype=get_default_dtype())


class Linear(Module):
    """``y = x @ W (+ b)`` with ``W`` stored as ``(d_in, d_out)``."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(_array(rng.normal(0.0, LINEAR_STD, size=(d_in, d_out))))
        self.bias = Parameter(_array(np.zeros(d_out))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)

    def trace(self, tracer, in_shape):
        d_in, d_out = self.weight.shape
        rows = int(np.prod(in_shape[:-1]))
        return tracer.emit(self, "", "linear", in_shape, tuple(in_shape[:-1]) + (d_out,), rows=rows, d_in=d_in, d_out=d_out)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(_array(np.ones(d)))
        self.beta = Parameter(_array(np.zeros(d)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, ops.LN_EPS)

    def trace(self, tracer, in_shape):
        return tracer.emit(self, "", "norm", in_shape, in_shape)


class BatchNorm2d(Module):
    """Per-channel normalization with learnable scale and shift.

    In training mode the statistics of the current input (over batch and
    spatial axes) are used and the running estimates are updated; in eval
    mode the running estimates are used.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = ops.BN_EPS):
        self.gamma = Parameter(_array(np.ones(c)))
        self.beta = Parameter(_array(np.zeros(c)))
        self.running_mean = _array(np.zeros(c))
        self.running_var = _array(np.ones(c))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            return ops.BatchNormEval.apply(
                x, self.gamma, self.beta, mean=self.running_mean, var=self.running_var, eps=self.eps
            )
        stats: dict = {}
        out = ops.BatchNormTrain.apply(x, self.gamma, self.beta, eps=self.eps, stats=stats)
        mean, var = stats["mean"], stats["var"]
        count = x.size // x.shape[-3]
        unbiased = var * count / max(count - 1, 1)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        return out


class ConvBN(Module):
    """Bias-free convolution, batch normalization, optional activation."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 1, stride: int = 1, mode: str = "standard",
                 act: Optional[str] = "silu", rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        if kernel == 1 and mode == "standard":
            mode = "pointwise"
        if mode == "depthwise":
            shape, fan_in = (c_out, 1, kernel, kernel), kernel * kernel
        else:
            shape, fan_in = (c_out, c_in, kernel, kernel), kernel * kernel * c_in
        self.weight = Parameter(_array(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)))
        self.bn = BatchNorm2d(c_out)
        self.mode, self.stride, self.padding, self.act = mode, stride, kernel // 2, act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(ops.conv2d(x, self.weight, self.mode, self.stride, self.padding))
        return y if self.act is None else ops.activation(y, self.act)

    def trace(self, tracer, in_shape):
        c_out, _, k, _ = self.weight.shape
        h, w = in_shape[-2:]
        ho = ops.conv_output_size(h, k, self.stride, self.padding)
        wo = ops.conv_output_size(w, k, self.stride, self.padding)
        out = tuple(in_shape[:-3]) + (c_out, ho, wo)
        # conv, folded normalization and in-place activation form one layer
        return tracer.emit(self, "", "conv", in_shape, out, mode=self.mode, k=k, c_in=in_shape[-3], c_out=c_out,
                           stride=self.stride, act=self.act)


class SqueezeExcite(Module):
    """Channel gate: average pool -> linear C->C/r -> SiLU -> linear -> sigmoid."""

    def __init__(self, c: int, reduction: int = 4, rng: Optional[np.random.Generator] = None):
        if c % reduction:
            raise ValueError(f"channels {c} not divisible by SE reduction {reduction}")
        self.fc1 = Linear(c, c // reduction, bias=True, rng=rng)
        self.fc2 = Linear(c // reduction, c, bias=True, rng=rng)

    def gate(self, x: Tensor) -> Tensor:
        lead, c = x.shape[:-3], x.shape[-3]
        pooled = ops.reshape(ops.mean(x, (-2, -1)), lead + (1, c))
        g = ops.sigmoid(self.fc2(ops.silu(self.fc1(pooled))))
        return ops.reshape(g, lead + (c, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return ops.mul(x, self.gate(x))

    def trace(self, tracer, in_shape):
        lead, c = tuple(in_shape[:-3]), in_shape[-3]
        tracer.emit(self, "pool", "pool", in_shape, lead + (1, c))
        self.fc1.trace(tracer, lead + (1, c))
        self.fc2.trace(tracer, lead + (1, self.fc1.weight.shape[1]))
        return tracer.emit(self, "scale", "act", in_shape, in_shape)


def se_module(x: Tensor, reduction: int = 4, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Apply a freshly initialized squeeze-excitation module to ``x``."""
    return SqueezeExcite(x.shape[-3], reduction, rng=rng)(x)
