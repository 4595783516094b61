"""Shared neural blocks: layer norm, multi-head attention, feed-forward."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError


def init_weight(name: str, shape, rng: np.random.Generator, scale: float = 0.02) -> Parameter:
    return Parameter(name, rng.normal(loc=0.0, scale=scale, size=shape))


def init_zeros(name: str, shape) -> Parameter:
    return Parameter(name, np.zeros(shape))


class LayerNorm:
    def __init__(self, name: str, width: int, eps: float = 1e-5):
        self.gain = Parameter(f"{name}/gain", np.ones(width))
        self.bias = init_zeros(f"{name}/bias", width)
        self.eps = eps
        self.width = width

    def parameters(self):
        return [self.gain, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        d = self.width
        mean = ad.mul(ad.sum_(x, axis=-1, keepdims=True), 1.0 / d)
        centered = ad.sub(x, ad.expand(mean, x.shape))
        var = ad.mul(ad.sum_(ad.mul(centered, centered), axis=-1, keepdims=True), 1.0 / d)
        scale = ad.sqrt(ad.add(var, self.eps))
        normed = ad.div(centered, ad.expand(scale, x.shape))
        return ad.add(ad.mul(normed, self.gain), self.bias)


class MultiHeadAttention:
    """Scaled dot-product attention with head split/merge via reshape."""

    def __init__(self, name: str, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ShapeError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.head_width = width // heads
        self.w_q = init_weight(f"{name}/w_q", (width, width), rng)
        self.w_k = init_weight(f"{name}/w_k", (width, width), rng)
        self.w_v = init_weight(f"{name}/w_v", (width, width), rng)
        self.w_o = init_weight(f"{name}/w_o", (width, width), rng)
        self.b_q = init_zeros(f"{name}/b_q", width)
        self.b_k = init_zeros(f"{name}/b_k", width)
        self.b_v = init_zeros(f"{name}/b_v", width)
        self.b_o = init_zeros(f"{name}/b_o", width)

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.b_q, self.b_k, self.b_v, self.b_o]

    def _split(self, t: Tensor, batch: int, length: int) -> Tensor:
        t = ad.reshape(t, (batch, length, self.heads, self.head_width))
        t = ad.swapaxes(t, 1, 2)
        return ad.reshape(t, (batch * self.heads, length, self.head_width))

    def __call__(self, query: Tensor, keys: Tensor, block_mask: np.ndarray | None = None) -> Tensor:
        """block_mask: bool, broadcastable to (batch, Lq, Lk); True blocks a slot."""
        if query.ndim != 3 or keys.ndim != 3:
            raise ShapeError("attention expects (batch, length, width) inputs")
        b, lq, _ = query.shape
        lk = keys.shape[1]
        q = self._split(ad.add(ad.matmul(query, self.w_q), self.b_q), b, lq)
        k = self._split(ad.add(ad.matmul(keys, self.w_k), self.b_k), b, lk)
        v = self._split(ad.add(ad.matmul(keys, self.w_v), self.b_v), b, lk)
        scores = ad.mul(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(self.head_width))
        if block_mask is not None:
            mask = np.broadcast_to(block_mask, (b, lq, lk))
            mask = np.repeat(mask, self.heads, axis=0) if self.heads > 1 else mask
            scores = ad.masked_fill(scores, mask, ad.neg_sentinel(scores.dtype))
        weights = ad.scaled_softmax(scores, scale=1.0, axis=-1)
        ctx = ad.matmul(weights, v)
        ctx = ad.reshape(ctx, (b, self.heads, lq, self.head_width))
        ctx = ad.swapaxes(ctx, 1, 2)
        ctx = ad.reshape(ctx, (b, lq, self.width))
        return ad.add(ad.matmul(ctx, self.w_o), self.b_o)


class FeedForward:
    def __init__(self, name: str, width: int, hidden: int, rng: np.random.Generator):
        self.w1 = init_weight(f"{name}/w1", (width, hidden), rng)
        self.b1 = init_zeros(f"{name}/b1", hidden)
        self.w2 = init_weight(f"{name}/w2", (hidden, width), rng)
        self.b2 = init_zeros(f"{name}/b2", width)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)
