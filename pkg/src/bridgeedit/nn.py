"""Small building blocks shared by the backbone and the gate."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T


def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype, zero: bool = False):
    if zero:
        return np.zeros((fan_in, fan_out), dtype=dtype), np.zeros((fan_out,), dtype=dtype)
    w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
    return w.astype(dtype), np.zeros((fan_out,), dtype=dtype)


def split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    """``(N, heads * hd)`` to ``(heads, N, hd)``."""
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: T.Tensor) -> T.Tensor:
    h, n, hd = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * hd))


def attention(q: T.Tensor, k: T.Tensor, v: T.Tensor, mask: np.ndarray | None = None):
    """Scaled dot-product attention over ``(heads, N, hd)`` operands.

    Returns the attended values and the post-softmax weights.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    # scaling q is cheaper than scaling the N x N logits
    logits = T.matmul(T.affine(q, scale), T.transpose(k, (0, 2, 1)))
    weights = T.softmax(logits, mask)
    return T.matmul(weights, v), weights


def norm(x: T.Tensor, gain: T.Tensor | None = None, bias: T.Tensor | None = None) -> T.Tensor:
    y = T.rms_norm(x)
    if gain is not None:
        y = T.mul(y, gain)
    if bias is not None:
        y = T.add(y, bias)
    return y
