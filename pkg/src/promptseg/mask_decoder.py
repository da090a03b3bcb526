"""Prompt-conditioned mask decoder.

A trainable stand-in with the foundation-style interface: sparse token
embeddings plus a dense embedding map conditioned on the high-level
query feature, two two-way attention blocks, a 4x learned upscale, and a
mask readout as the inner product between the mask token and every
location of the upscaled embedding.
"""

from __future__ import annotations

import numpy as np

from promptseg.config import DecoderConfig
from promptseg.layers import Conv1x1, Parameter, TwoWayBlock, flatten_map
from promptseg.tensor import (DimensionError, Tensor, add, bilinear_resize,
                              concat, mul, relu, reshape, tsum)


class MaskDecoder:
    def __init__(self, cfg: DecoderConfig, c_out: int, c_high: int, rng):
        self.c_out = c_out
        self.proj = Conv1x1("dec.proj", c_high, c_out, rng) if c_high != c_out else None
        self.mask_token = Parameter("dec.mask_token", rng.standard_normal(c_out) * 0.02)
        self.blocks = [TwoWayBlock(f"dec.block{i}", c_out, cfg.attn_channels,
                                   cfg.ffn_channels, rng)
                       for i in range(cfg.blocks)]
        self.up1 = Conv1x1("dec.up1", c_out, c_out, rng)
        self.up2 = Conv1x1("dec.up2", c_out, c_out, rng)

    def params(self):
        out = [] if self.proj is None else self.proj.params()
        out = out + [self.mask_token]
        for b in self.blocks:
            out += b.params()
        return out + self.up1.params() + self.up2.params()

    def __call__(self, sparse: Tensor, dense: Tensor, f3_q: Tensor) -> Tensor:
        if sparse.ndim != 2 or sparse.shape[1] != self.c_out:
            raise DimensionError(f"sparse tokens must be (k,{self.c_out}), got {sparse.shape}")
        image_map = f3_q if self.proj is None else self.proj(f3_q)
        if image_map.shape != dense.shape:
            raise DimensionError(
                f"dense embedding {dense.shape} does not match image embedding {image_map.shape}")
        c, h, w = image_map.shape
        image = flatten_map(add(image_map, dense))
        tokens = concat([reshape(self.mask_token.tensor, (1, c)), sparse], axis=0)
        for block in self.blocks:
            tokens, image = block(tokens, image)
        emb = reshape(image.T, (c, h, w))
        emb = relu(self.up1(bilinear_resize(emb, (2 * h, 2 * w))))
        emb = relu(self.up2(bilinear_resize(emb, (4 * h, 4 * w))))
        mask_out = reshape(tokens[0], (c, 1, 1))
        return tsum(mul(emb, mask_out), axis=0)
