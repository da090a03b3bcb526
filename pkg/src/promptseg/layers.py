"""Small trainable building blocks shared by the prompt generator and the
mask decoder: linear maps, layer norm, single-head attention, and the two
transformer block flavors built from them.

Token-axis reductions inside attention run in sorted order so that
permuting the key/value tokens reproduces results bitwise, not just to
float tolerance. That keeps the decoder's sparse-token permutation
invariance exact.
"""

from __future__ import annotations

import math

import numpy as np

from promptseg.tensor import (DimensionError, Parameter, Tensor, add, matmul,
                              mul, relu, reshape, softmax, tsin)
from promptseg.tensor import layer_norm as ln_op


class Linear:
    """y = x @ w + b with 1/sqrt(fan_in) Gaussian init and zero bias."""

    def __init__(self, prefix: str, d_in: int, d_out: int, rng):
        scale = 1.0 / math.sqrt(d_in)
        self.w = Parameter(f"{prefix}.w", rng.standard_normal((d_in, d_out)) * scale)
        self.b = Parameter(f"{prefix}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w.tensor), self.b.tensor)

    def params(self):
        return [self.w, self.b]


class Conv1x1:
    """Pointwise convolution over (c,h,w) maps; a Linear across channels."""

    def __init__(self, prefix: str, c_in: int, c_out: int, rng):
        scale = 1.0 / math.sqrt(c_in)
        self.w = Parameter(f"{prefix}.w", rng.standard_normal((c_out, c_in)) * scale)
        self.b = Parameter(f"{prefix}.b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        from promptseg.tensor import conv1x1
        return conv1x1(x, self.w.tensor, self.b.tensor)

    def params(self):
        return [self.w, self.b]


class LayerNorm:
    """Learnable affine layer norm over the last axis."""

    def __init__(self, prefix: str, dim: int):
        self.gamma = Parameter(f"{prefix}.gamma", np.ones(dim))
        self.beta = Parameter(f"{prefix}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ln_op(x, self.gamma.tensor, self.beta.tensor)

    def params(self):
        return [self.gamma, self.beta]


class Attention:
    """Single-head scaled dot-product attention with q/k/v/out projections.

    Key/value token order cannot influence the output bits: the softmax
    normalizer and the value aggregation both sum in sorted order.
    """

    def __init__(self, prefix: str, dim: int, attn_dim: int, rng):
        self.wq = Linear(f"{prefix}.q", dim, attn_dim, rng)
        self.wk = Linear(f"{prefix}.k", dim, attn_dim, rng)
        self.wv = Linear(f"{prefix}.v", dim, attn_dim, rng)
        self.wo = Linear(f"{prefix}.o", attn_dim, dim, rng)
        self.scale = 1.0 / math.sqrt(attn_dim)

    def __call__(self, queries: Tensor, keys_values: Tensor) -> Tensor:
        q = self.wq(queries)
        k = self.wk(keys_values)
        v = self.wv(keys_values)
        scores = mul(matmul(q, k.T), self.scale)
        weights = softmax(scores, axis=1, order_invariant=True)
        return self.wo(matmul(weights, v, order_invariant=True))

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


class FeedForward:
    """Two linear layers with a ReLU between."""

    def __init__(self, prefix: str, dim: int, hidden: int, rng):
        self.fc1 = Linear(f"{prefix}.fc1", dim, hidden, rng)
        self.fc2 = Linear(f"{prefix}.fc2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))

    def params(self):
        return self.fc1.params() + self.fc2.params()


class DecoderBlock:
    """Prompt-generator block: token self-attention, token-to-image
    cross-attention, feed-forward; residual + layer norm after each."""

    def __init__(self, prefix: str, dim: int, ffn_hidden: int, rng):
        self.self_attn = Attention(f"{prefix}.self", dim, dim, rng)
        self.cross = Attention(f"{prefix}.cross", dim, dim, rng)
        self.ffn = FeedForward(f"{prefix}.ffn", dim, ffn_hidden, rng)
        self.ln1 = LayerNorm(f"{prefix}.ln1", dim)
        self.ln2 = LayerNorm(f"{prefix}.ln2", dim)
        self.ln3 = LayerNorm(f"{prefix}.ln3", dim)

    def __call__(self, tokens: Tensor, image: Tensor) -> Tensor:
        t = self.ln1(add(tokens, self.self_attn(tokens, tokens)))
        t = self.ln2(add(t, self.cross(t, image)))
        return self.ln3(add(t, self.ffn(t)))

    def params(self):
        out = self.self_attn.params() + self.cross.params() + self.ffn.params()
        return out + self.ln1.params() + self.ln2.params() + self.ln3.params()


class TwoWayBlock:
    """Mask-decoder block: tokens attend to themselves and to the image,
    then the image attends back to the tokens."""

    def __init__(self, prefix: str, dim: int, attn_dim: int, ffn_hidden: int, rng):
        self.self_attn = Attention(f"{prefix}.self", dim, attn_dim, rng)
        self.t2i = Attention(f"{prefix}.t2i", dim, attn_dim, rng)
        self.i2t = Attention(f"{prefix}.i2t", dim, attn_dim, rng)
        self.ffn = FeedForward(f"{prefix}.ffn", dim, ffn_hidden, rng)
        self.ln1 = LayerNorm(f"{prefix}.ln1", dim)
        self.ln2 = LayerNorm(f"{prefix}.ln2", dim)
        self.ln3 = LayerNorm(f"{prefix}.ln3", dim)
        self.ln4 = LayerNorm(f"{prefix}.ln4", dim)

    def __call__(self, tokens: Tensor, image: Tensor):
        t = self.ln1(add(tokens, self.self_attn(tokens, tokens)))
        t = self.ln2(add(t, self.t2i(t, image)))
        t = self.ln3(add(t, self.ffn(t)))
        img = self.ln4(add(image, self.i2t(image, t)))
        return t, img

    def params(self):
        out = self.self_attn.params() + self.t2i.params() + self.i2t.params()
        out += self.ffn.params()
        return out + self.ln1.params() + self.ln2.params() + self.ln3.params() + self.ln4.params()


def sine_positions(n: int, dim: int) -> np.ndarray:
    """Fixed interleaved sine/cosine encodings over flattened positions.

    pe[p, 2i] = sin(p * 10000^(-2i/dim)), pe[p, 2i+1] = cos(...); dim even.
    """
    if dim % 2 != 0:
        raise DimensionError(f"positional encoding width must be even, got {dim}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(10000.0) * 2.0 * np.arange(dim // 2, dtype=np.float64) / dim)
    angles = pos * freqs[None, :]
    pe = np.zeros((n, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def flatten_map(f: Tensor) -> Tensor:
    """(c,h,w) feature map to (h*w, c) token matrix."""
    c, h, w = f.shape
    return reshape(f, (c, h * w)).T


def sine_lift(x: Tensor) -> Tensor:
    """x + sin(x), the sparse-embedding output nonlinearity."""
    return add(x, tsin(x))
