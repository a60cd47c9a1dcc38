"""Cross feature attention and the softmax self-attention baseline.

Both map token matrices ``(..., N, D_emb)`` to the same shape. Cross feature
attention never forms an ``N x N`` object: it L2-normalizes queries and keys
per token, reduces the keys to a ``1 x D`` context score (weighted over tokens)
and an ``N x 1`` feature score (weighted over features), and combines them into
a ``D x D`` map that is applied to the values. Its cost is linear in ``N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ops
from .core.module import Module
from .core.ops import l2_normalize_rows, matmul, softmax_rows, swap_last
from .core.tensor import Parameter, ShapeError, Tensor, get_default_dtype

INIT_STD = 0.02
DEFAULT_HEADS = 4


@dataclass(frozen=True)
class AttentionConfig:
    """Which attention to build and its sizes.

    ``num_heads`` belongs to ``mhsa`` and ``n_train`` (the token count the
    context kernel is sized for) to ``xfa``; supplying the other kind's field
    is an error.
    """

    kind: str
    d_emb: int
    d_qkv: int
    num_heads: Optional[int] = None
    n_train: Optional[int] = None

    def __post_init__(self):
        if self.kind == "mhsa":
            if self.n_train is not None:
                raise ValueError("n_train applies to xfa only")
            heads = DEFAULT_HEADS if self.num_heads is None else self.num_heads
            object.__setattr__(self, "num_heads", heads)
            if heads < 1 or self.d_qkv % heads:
                raise ValueError(f"d_qkv={self.d_qkv} is not divisible by num_heads={heads}")
        elif self.kind == "xfa":
            if self.num_heads is not None:
                raise ValueError("num_heads applies to mhsa only")
            if self.n_train is None or self.n_train < 1:
                raise ValueError("xfa needs a positive n_train")
        else:
            raise ValueError(f"unknown attention kind {self.kind!r}; expected 'mhsa' or 'xfa'")
        if self.d_emb < 1 or self.d_qkv < 1:
            raise ValueError("attention dimensions must be positive")


def _normal(rng: np.random.Generator, shape, std=INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(get_default_dtype()))


class MhsaParams(Module):
    """Bias-free Q/K/V/output projections for multi-head softmax attention."""

    def __init__(self, w_q, w_k, w_v, w_o, num_heads: int = DEFAULT_HEADS):
        self.w_q, self.w_k, self.w_v, self.w_o = (
            w if isinstance(w, Parameter) else Parameter(w) for w in (w_q, w_k, w_v, w_o)
        )
        d_qkv = self.w_q.shape[1]
        if d_qkv % num_heads:
            raise ValueError(f"d_qkv={d_qkv} is not divisible by num_heads={num_heads}")
        self.num_heads = num_heads

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "MhsaParams":
        d, q = cfg.d_emb, cfg.d_qkv
        return cls(_normal(rng, (d, q)), _normal(rng, (d, q)), _normal(rng, (d, q)), _normal(rng, (q, d)), cfg.num_heads)

    @property
    def d_emb(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1] // self.num_heads

    def forward(self, x: Tensor) -> Tensor:
        return mhsa_forward(self, x)


class XfaParams(Module):
    """Projections plus the context kernel ``w_c`` (1 x N_train), feature kernel
    ``w_f`` (1 x D_qkv) and scalar ``temperature``."""

    def __init__(self, w_q, w_k, w_v, w_o, w_c, w_f, temperature=1.0):
        self.w_q, self.w_k, self.w_v, self.w_o = (
            w if isinstance(w, Parameter) else Parameter(w) for w in (w_q, w_k, w_v, w_o)
        )
        self.w_c = w_c if isinstance(w_c, Parameter) else Parameter(w_c)
        self.w_f = w_f if isinstance(w_f, Parameter) else Parameter(w_f)
        if isinstance(temperature, Parameter):
            self.temperature = temperature
        else:
            self.temperature = Parameter(np.asarray(temperature, dtype=self.w_q.dtype).reshape(()))
        d_qkv = self.w_q.shape[1]
        if self.w_c.ndim != 2 or self.w_c.shape[0] != 1:
            raise ShapeError(f"w_c must be 1 x N_train, got {self.w_c.shape}")
        if self.w_f.shape != (1, d_qkv):
            raise ShapeError(f"w_f must be 1 x {d_qkv}, got {self.w_f.shape}")
        if self.temperature.size != 1:
            raise ShapeError("temperature must be a single scalar")

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "XfaParams":
        d, q = cfg.d_emb, cfg.d_qkv
        return cls(
            _normal(rng, (d, q)),
            _normal(rng, (d, q)),
            _normal(rng, (d, q)),
            _normal(rng, (q, d)),
            _normal(rng, (1, cfg.n_train)),
            _normal(rng, (1, q)),
            1.0,
        )

    @property
    def d_emb(self) -> int:
        return self.w_q.shape[0]

    @property
    def n_train(self) -> int:
        return self.w_c.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return xfa_forward(self, x)


def build_attention(cfg: AttentionConfig, rng: np.random.Generator) -> Module:
    return XfaParams.init(cfg, rng) if cfg.kind == "xfa" else MhsaParams.init(cfg, rng)


def _check_tokens(x: Tensor, d_emb: int) -> None:
    if x.ndim < 2 or x.shape[-1] != d_emb:
        raise ShapeError(f"attention expects (..., N, {d_emb}) tokens, got {x.shape}")


def mhsa_forward(params: MhsaParams, x: Tensor) -> Tensor:
    """Per head ``softmax(Q K^T / sqrt(d_head)) V``, heads concatenated, then ``W_o``."""
    _check_tokens(x, params.d_emb)
    n, h, dh = x.shape[-2], params.num_heads, params.d_head
    lead = x.shape[:-2]
    nl = len(lead)
    split = list(range(nl)) + [nl + 1, nl, nl + 2]  # (.., N, h, dh) <-> (.., h, N, dh)

    def heads(t):
        return ops.permute(ops.reshape(t, lead + (n, h, dh)), split)

    q, k, v = heads(matmul(x, params.w_q)), heads(matmul(x, params.w_k)), heads(matmul(x, params.w_v))
    scores = ops.mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax_rows(scores), v)
    merged = ops.reshape(ops.permute(ctx, split), lead + (n, h * dh))
    return matmul(merged, params.w_o)


def xfa_normalize(q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
    """Unit-normalize every token row of the queries and keys."""
    return l2_normalize_rows(q), l2_normalize_rows(k)


def interpolate_wc(w_c: Tensor, n_runtime: int) -> Tensor:
    """Linearly resample a ``1 x N_train`` kernel onto ``n_runtime`` evenly spaced
    points (endpoints aligned). Returns ``w_c`` itself when the lengths agree."""
    if n_runtime < 1:
        raise ValueError("n_runtime must be >= 1")
    n_train = w_c.shape[-1]
    if n_runtime == n_train:
        return w_c
    return matmul(w_c, Tensor(interpolation_matrix(n_train, n_runtime), dtype=w_c.dtype))


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_in, n_out)`` matrix M such that ``v @ M`` is the linear resampling of v."""
    m = np.zeros((n_in, n_out))
    if n_in == 1:
        m[0, :] = 1.0
        return m
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    cols = np.arange(n_out)
    m[lo, cols] += 1.0 - frac
    m[lo + 1, cols] += frac
    return m


def xfa_scores(k_hat: Tensor, w_c: Tensor, w_f: Tensor) -> tuple[Tensor, Tensor]:
    """Context score ``k_c = W_c K_hat`` (1 x D) and feature score
    ``k_f = (W_f K_hat^T)^T`` (N x 1)."""
    n, d = k_hat.shape[-2:]
    if w_c.shape[-1] != n:
        raise ShapeError(f"w_c has length {w_c.shape[-1]} but there are {n} tokens")
    if w_f.shape[-1] != d:
        raise ShapeError(f"w_f has length {w_f.shape[-1]} but keys have {d} features")
    k_c = matmul(w_c, k_hat)
    k_f = swap_last(matmul(w_f, swap_last(k_hat)))
    return k_c, k_f


def xfa_attention_map(q_hat: Tensor, k_c: Tensor, k_f: Tensor, temperature: Tensor) -> Tensor:
    """The ``D x D`` map ``lambda * (Q_hat^T k_f) k_c``."""
    return matmul(ops.mul(matmul(swap_last(q_hat), k_f), temperature), k_c)


def xfa_forward(params: XfaParams, x: Tensor) -> Tensor:
    """Cross feature attention: ``(V (lambda Q_hat^T k_f k_c)) W_o``, no softmax.

    A token count different from the kernel's training length resamples
    ``w_c`` with :func:`interpolate_wc`.
    """
    _check_tokens(x, params.d_emb)
    q, k, v = matmul(x, params.w_q), matmul(x, params.w_k), matmul(x, params.w_v)
    q_hat, k_hat = xfa_normalize(q, k)
    w_c = interpolate_wc(params.w_c, x.shape[-2])
    k_c, k_f = xfa_scores(k_hat, w_c, params.w_f)
    core = xfa_attention_map(q_hat, k_c, k_f, params.temperature)
    return matmul(matmul(v, core), params.w_o)
