"""Attention building blocks shared by the backbone, the MoT variant and memory."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Linear, Module, RMSNorm


def rope_tables(positions: np.ndarray, dim: int, base: float = 10000.0):
    half = dim // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=float)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rotary position encoding on the last axis of (.., T, d_h) using rotate-half pairs."""
    d = x.shape[-1]
    cos, sin = rope_tables(positions, d)
    half = d // 2
    x1, x2 = x[..., :half], x[..., half:]
    return ad.concat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, ordered: bool = True) -> Tensor:
    """Scaled dot-product attention on (B, h, T, d_h) tensors.

    ``mask`` (Tq, Tk) is True where attending is allowed. With ``ordered``
    both contractions accumulate in a fixed order so the result at a query
    does not depend on keys it cannot see.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ad.matmul(q, k.swapaxes(-1, -2), ordered=ordered) * scale
    if mask is not None:
        scores = ad.masked_fill(scores, ~np.asarray(mask, dtype=bool), -np.inf)
    return ad.matmul(ad.softmax(scores), v, ordered=ordered)


class Expert(Module):
    """Pre-norm attention projections plus FFN for one group of tokens.

    Queries use ``q_heads`` heads of width ``head_dim``; keys and values are
    always produced for ``kv_heads`` heads so every group contributes to the
    same key/value pool.
    """

    def __init__(self, rng, hidden: int, q_heads: int, kv_heads: int, ffn: int, zero_residual: bool = False):
        self.head_dim = hidden // kv_heads
        self.q_heads = q_heads
        self.kv_heads = kv_heads
        self.norm1 = RMSNorm(hidden)
        self.wq = Linear(rng, hidden, q_heads * self.head_dim)
        self.wk = Linear(rng, hidden, kv_heads * self.head_dim)
        self.wv = Linear(rng, hidden, kv_heads * self.head_dim)
        self.wo = Linear(rng, q_heads * self.head_dim, hidden, zero=zero_residual)
        self.norm2 = RMSNorm(hidden)
        self.ffn = MLP(rng, hidden, ffn, hidden, zero_out=zero_residual)

    def project(self, x: Tensor):
        h = self.norm1(x)
        return self.wq(h), self.wk(h), self.wv(h)

    def finish(self, x: Tensor, attn: Tensor) -> Tensor:
        x = x + self.wo(attn)
        return x + self.ffn(self.norm2(x))


class DenseBlock(Module):
    def __init__(self, rng, hidden: int, heads: int, ffn: int, zero_residual: bool = False):
        self.expert = Expert(rng, hidden, heads, heads, ffn, zero_residual)

    def __call__(self, x: Tensor, roles: np.ndarray, mask: np.ndarray, positions: np.ndarray, exact: bool = True,
                 **_) -> Tensor:
        e = self.expert
        q, k, v = e.project(x)
        q = apply_rope(split_heads(q, e.q_heads), positions)
        k = apply_rope(split_heads(k, e.kv_heads), positions)
        out = attention(q, k, split_heads(v, e.kv_heads), mask, ordered=exact)
        return e.finish(x, merge_heads(out))


class CrossBlock(Module):
    """Query self-attention, cross-attention to a context, then FFN (no masking)."""

    def __init__(self, rng, hidden: int, heads: int, ffn: int):
        self.heads = heads
        self.norm_s = RMSNorm(hidden)
        self.self_qkv = Linear(rng, hidden, 3 * hidden)
        self.self_o = Linear(rng, hidden, hidden)
        self.norm_q = RMSNorm(hidden)
        self.norm_c = RMSNorm(hidden)
        self.cross_q = Linear(rng, hidden, hidden)
        self.cross_kv = Linear(rng, hidden, 2 * hidden)
        self.cross_o = Linear(rng, hidden, hidden)
        self.norm_f = RMSNorm(hidden)
        self.ffn = MLP(rng, hidden, 2 * hidden, hidden)

    def __call__(self, q: Tensor, ctx: Tensor) -> Tensor:
        d = q.shape[-1]
        qkv = self.self_qkv(self.norm_s(q))
        s = attention(*(split_heads(qkv[..., i * d : (i + 1) * d], self.heads) for i in range(3)), ordered=False)
        q = q + self.self_o(merge_heads(s))
        kv = self.cross_kv(self.norm_c(ctx))
        c = attention(
            split_heads(self.cross_q(self.norm_q(q)), self.heads),
            split_heads(kv[..., :d], self.heads),
            split_heads(kv[..., d:], self.heads),
            ordered=False,
        )
        q = q + self.cross_o(merge_heads(c))
        return q + self.ffn(self.norm_f(q))
