"""Differentiable primitives.

All operations act on the trailing axes and accept any number of leading
(batch) axes, so the same code serves single samples and mini-batches.
Image tensors are channel-first: ``(C, H, W)`` or ``(B, C, H, W)``.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, ShapeError, Tensor, as_tensor

GELU_COEF = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_CUBIC = 0.044715
L2_EPS = 1e-12
LN_EPS = 1e-5
BN_EPS = 1e-5


def _pair(a, b):
    """Coerce a binary-op operand pair to tensors sharing the tensor dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic ---------------------------------------------------


class Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


def add(a, b) -> Tensor:
    return Add.apply(*_pair(a, b))


def sub(a, b) -> Tensor:
    return Sub.apply(*_pair(a, b))


def mul(a, b) -> Tensor:
    return Mul.apply(*_pair(a, b))


# -- linear algebra and layout -----------------------------------------------


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        return np.matmul(g, np.swapaxes(self.b, -1, -2)), np.matmul(np.swapaxes(self.a, -1, -2), g)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Raises:
        ShapeError: if the inner dimensions differ; the message names both shapes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


class Permute(Function):
    name = "permute"

    def forward(self, x, axes):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


def permute(x: Tensor, axes) -> Tensor:
    return Permute.apply(x, axes=tuple(axes))


def swap_last(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    name = "sum"

    def forward(self, x, axis):
        self.in_shape = x.shape
        self.axes = _norm_axes(axis, x.ndim)
        return np.sum(x, axis=self.axes)

    def backward(self, g):
        return (np.broadcast_to(np.expand_dims(g, self.axes), self.in_shape),)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    return Sum.apply(x, axis=axis)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axes), 1.0 / count)


class Pad2d(Function):
    """Zero padding on the bottom and right of the last two axes."""

    name = "pad2d"

    def forward(self, x, bottom, right):
        self.h, self.w = x.shape[-2:]
        widths = [(0, 0)] * (x.ndim - 2) + [(0, bottom), (0, right)]
        return np.pad(x, widths)

    def backward(self, g):
        return (g[..., : self.h, : self.w],)


class Crop2d(Function):
    name = "crop2d"

    def forward(self, x, h, w):
        self.in_shape = x.shape
        return x[..., :h, :w].copy()

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=g.dtype)
        out[..., : g.shape[-2], : g.shape[-1]] = g
        return (out,)


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    if bottom == 0 and right == 0:
        return x
    return Pad2d.apply(x, bottom=bottom, right=right)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[-2:] == (h, w):
        return x
    return Crop2d.apply(x, h=h, w=w)


# -- normalizations ------------------------------------------------------------


class SoftmaxRows(Function):
    name = "softmax"

    def forward(self, x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        self.y = z / z.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row maximum."""
    return SoftmaxRows.apply(x)


class L2NormalizeRows(Function):
    name = "l2_normalize"

    def forward(self, x, eps):
        self.eps = eps
        self.norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        self.denom = np.maximum(self.norm, eps)
        self.y = x / self.denom
        return self.y

    def backward(self, g):
        active = self.norm > self.eps
        radial = (g * self.y).sum(axis=-1, keepdims=True)
        return (np.where(active, g - self.y * radial, g) / self.denom,)


def l2_normalize_rows(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Divide each row (last axis) by ``max(||row||_2, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return L2NormalizeRows.apply(x, eps=eps)


def _normalize_backward(g_hat, xhat, rstd, axes):
    # gradient of (x - mean) * rstd with statistics over `axes`
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return rstd * (g_hat - m1 - xhat * m2)


class LayerNorm(Function):
    name = "layer_norm"

    def forward(self, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        lead = tuple(range(g.ndim - 1))
        dx = _normalize_backward(g * self.gamma, self.xhat, self.rstd, -1)
        return dx, (g * self.xhat).sum(axis=lead), g.sum(axis=lead)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis with the biased variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def _channel_view(v: np.ndarray) -> np.ndarray:
    # per-channel vector broadcast against (..., C, H, W)
    return v.reshape(-1, 1, 1)


class BatchNormTrain(Function):
    """Per-channel normalization with statistics over all non-channel axes."""

    name = "batch_norm"

    def forward(self, x, gamma, beta, eps, stats=None):
        self.axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
        mu = x.mean(axis=self.axes, keepdims=True)
        var = x.var(axis=self.axes, keepdims=True)
        if stats is not None:
            stats["mean"], stats["var"] = mu.reshape(-1), var.reshape(-1)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.rstd
        self.gamma = _channel_view(gamma)
        return self.xhat * self.gamma + _channel_view(beta)

    def backward(self, g):
        dx = _normalize_backward(g * self.gamma, self.xhat, self.rstd, self.axes)
        return dx, (g * self.xhat).sum(axis=self.axes), g.sum(axis=self.axes)


class BatchNormEval(Function):
    name = "batch_norm"

    def forward(self, x, gamma, beta, mean, var, eps):
        self.rstd = _channel_view(1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = (x - _channel_view(mean)) * self.rstd
        self.gamma = _channel_view(gamma)
        return self.xhat * self.gamma + _channel_view(beta)

    def backward(self, g):
        axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
        return g * self.gamma * self.rstd, (g * self.xhat).sum(axis=axes), g.sum(axis=axes)


# -- activations -----------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


class Silu(Function):
    name = "silu"

    def forward(self, x):
        self.x = x
        self.s = _sigmoid(x)
        return x * self.s

    def backward(self, g):
        s = self.s
        return (g * s * (1.0 + self.x * (1.0 - s)),)


class Gelu(Function):
    """Tanh approximation of GELU."""

    name = "gelu"

    def forward(self, x):
        self.x = x
        self.t = np.tanh(GELU_COEF * (x + GELU_CUBIC * x**3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, g):
        x, t = self.x, self.t
        dinner = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype)

    def backward(self, g):
        return (g * self.mask,)


_ACTIVATIONS = {"sigmoid": Sigmoid, "silu": Silu, "gelu": Gelu, "relu": Relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def silu(x):
    return Silu.apply(x)


def gelu(x):
    return Gelu.apply(x)


def relu(x):
    return Relu.apply(x)


# -- convolution -------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


class Conv2d(Function):
    """Cross-correlation over ``(B, C, H, W)`` with zero padding."""

    name = "conv2d"

    def forward(self, x, w, mode, stride, padding):
        self.mode, self.stride, self.padding = mode, stride, padding
        self.squeeze = x.ndim == 3
        if self.squeeze:
            x = x[None]
        self.in_shape = x.shape
        self.w = w
        if mode == "pointwise":
            xs = x[:, :, ::stride, ::stride]
            self.xs = xs
            b, c, h, wd = xs.shape
            out = np.matmul(w[:, :, 0, 0], xs.reshape(b, c, h * wd)).reshape(b, -1, h, wd)
        else:
            k = w.shape[-1]
            xp = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)]) if padding else x
            self.padded_shape = xp.shape
            cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
            self.cols = cols
            if mode == "depthwise":
                out = np.zeros(cols.shape[:4], dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        out += cols[..., i, j] * w[:, 0, i, j][None, :, None, None]
            else:
                out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        return out[0] if self.squeeze else out

    def backward(self, g):
        if self.squeeze:
            g = g[None]
        s = self.stride
        if self.mode == "pointwise":
            b, c, h, wd = self.xs.shape
            g2 = g.reshape(b, -1, h * wd)
            w2 = self.w[:, :, 0, 0]
            dw = np.einsum("bop,bcp->oc", g2, self.xs.reshape(b, c, h * wd), optimize=True)[:, :, None, None]
            dxs = np.matmul(w2.T, g2).reshape(b, c, h, wd)
            if s == 1:
                dx = dxs
            else:
                dx = np.zeros(self.in_shape, dtype=g.dtype)
                dx[:, :, ::s, ::s] = dxs
        else:
            k = self.w.shape[-1]
            ho, wo = g.shape[-2:]
            depthwise = self.mode == "depthwise"
            dw = np.zeros_like(self.w)
            dxp = np.zeros(self.padded_shape, dtype=g.dtype)
            # accumulate one kernel tap at a time instead of materializing k*k column copies
            for i in range(k):
                for j in range(k):
                    tap = self.cols[..., i, j]
                    window = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                    if depthwise:
                        dw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, tap)
                        dxp[window] += g * self.w[:, 0, i, j][None, :, None, None]
                    else:
                        dw[:, :, i, j] = np.tensordot(g, tap, axes=([0, 2, 3], [0, 2, 3]))
                        dxp[window] += np.einsum("bohw,oc->bchw", g, self.w[:, :, i, j], optimize=True)
            p = self.padding
            dx = dxp[:, :, p : p + self.in_shape[2], p : p + self.in_shape[3]] if p else dxp
        if self.squeeze:
            dx = dx[0]
        return dx, dw


def conv2d(x: Tensor, kernel: Tensor, mode: str = "standard", stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) on channel-first input.

    Kernel layouts: ``standard`` (C_out, C_in, k, k); ``depthwise`` (C, 1, k, k),
    one filter per channel; ``pointwise`` (C_out, C_in, 1, 1).

    Raises:
        ShapeError: on a kernel that does not fit ``mode`` or the input
            channels, or when the output would have a non-positive extent.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d expects (C, H, W) or (B, C, H, W), got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d kernel must be (C_out, C_in/groups, k, k), got {kernel.shape}")
    c, h, w = x.shape[-3:]
    co, ci, k, _ = kernel.shape
    if mode == "standard":
        ok = ci == c
    elif mode == "depthwise":
        ok = co == c and ci == 1
    elif mode == "pointwise":
        ok = ci == c and k == 1 and padding == 0
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    if not ok:
        raise ShapeError(f"{mode} conv kernel {kernel.shape} does not match input {x.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {x.shape}, kernel {k}, padding {padding}")
    return Conv2d.apply(x, kernel, mode=mode, stride=stride, padding=padding)


# -- losses ---------------------------------------------------------------------------


class CrossEntropy(Function):
    name = "cross_entropy"

    def forward(self, logits, labels):
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        self.labels = labels
        self.p = np.exp(logp)
        rows = np.arange(logits.shape[0])
        return np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(self, g):
        d = self.p.copy()
        d[np.arange(d.shape[0]), self.labels] -= 1.0
        return (g * d / d.shape[0],)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy expects (B, K) logits for {labels.shape[0]} labels, got {logits.shape}")
    return CrossEntropy.apply(logits, labels=labels)


def constant(data, like: Optional[Tensor] = None) -> Tensor:
    """A non-learnable tensor, matching the dtype of ``like`` when given."""
    return Tensor(data, dtype=None if like is None else like.dtype)
