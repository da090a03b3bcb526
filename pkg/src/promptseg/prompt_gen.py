"""Meta prompt generator: turns transformed support/query features plus the
support mask into sparse token embeddings and a dense embedding map for
the mask decoder, replacing hand-placed point/box prompts.

Sparse path: reduce mid features, pool a support prototype, expand it
into k tokens, run them through a small transformer decoder against the
query feature tokens, lift to the output width, then apply x + sin(x).

Dense path: a prior mask from high-level cosine similarity is stacked
with the tiled prototype and the reduced query map, squeezed by a 1x1
conv, enhanced by a multi-scale pooling pyramid, and lifted to the
output width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from promptseg.anchor_transform import masked_avg_pool
from promptseg.config import MpgConfig
from promptseg.layers import (Conv1x1, DecoderBlock, Linear, Parameter,
                              flatten_map, sine_lift, sine_positions)
from promptseg.tensor import (COSINE_EPS, NORM_TINY, DimensionError, Tensor,
                              add, adaptive_avg_pool, bilinear_resize,
                              broadcast_to, concat, div, matmul, mul, relu,
                              reshape, sub, tmax, tmin, tsqrt, tsum)

# Raw similarity ranges below this count as constant. Must sit above the
# noise the cosine denominator guard injects (~1e-8 per location) yet far
# below any genuine similarity spread.
PRIOR_FLAT_EPS = 1e-6


@dataclass
class PromptOutput:
    sparse: Tensor           # (k, c_o)
    dense: Tensor            # (c_o, h, w)
    prior: Tensor            # (1, h, w) in [0,1]
    prior_degenerate: bool   # True when the prior fell back to constant 0.5
    query_reduced: Tensor    # (c_r, h, w)
    prototype: Tensor        # (c_r,)


def _unit_columns(flat: Tensor) -> tuple[Tensor, Tensor]:
    """Columns of a (c,n) matrix with their norms, for cosine matrices."""
    norms = tsqrt(add(tsum(mul(flat, flat), axis=0, keepdims=True), NORM_TINY))
    return flat, norms


def cosine_rows(f_q: Tensor, f_s_flat: Tensor) -> Tensor:
    """(hq, ns) cosine similarities between query locations and support columns."""
    c = f_q.shape[0]
    q_flat = reshape(f_q, (c, f_q.shape[1] * f_q.shape[2]))
    _, nq = _unit_columns(q_flat)
    _, ns = _unit_columns(f_s_flat)
    dots = matmul(q_flat.T, f_s_flat)
    denom = add(matmul(nq.T, ns), COSINE_EPS)
    return div(dots, denom)


def prior_from_features(support_high, masks, f3_q: Tensor):
    """Max cosine similarity of each query location against every support
    foreground location, min-max normalized to [0,1].

    Multi-shot episodes pool the foreground locations of all shots. An
    empty foreground or a constant similarity map degenerates to a flat
    0.5 mask with the flag set.
    """
    c, h, w = f3_q.shape
    flats, sel = [], []
    for f, m in zip(support_high, masks):
        flats.append(reshape(f, (c, h * w)))
        sel.append(np.asarray(m).reshape(h * w))
    fs_all = concat(flats, axis=1) if len(flats) > 1 else flats[0]
    fg = np.concatenate(sel)
    if fg.sum() == 0:
        return Tensor(np.full((1, h, w), 0.5, dtype=f3_q.data.dtype)), True
    sim = cosine_rows(f3_q, fs_all)
    # push non-foreground columns below the cosine range so the max
    # only ever routes through foreground positions
    fg_row = Tensor(fg.reshape(1, -1))
    gated = add(mul(sim, fg_row), Tensor((fg - 1.0).reshape(1, -1) * 2.0))
    raw = tmax(gated, axis=1)
    lo, hi = tmin(raw), tmax(raw)
    if float(hi.data - lo.data) < PRIOR_FLAT_EPS:
        return Tensor(np.full((1, h, w), 0.5, dtype=f3_q.data.dtype)), True
    normed = div(sub(raw, lo), sub(hi, lo))
    return reshape(normed, (1, h, w)), False


class PromptGenerator:
    """All trainable pieces of the prompt path, wired per the module doc."""

    def __init__(self, cfg: MpgConfig, c_mid: int, c_high: int, rng):
        self.cfg = cfg
        c_r, c_o, k = cfg.reduced_channels, cfg.output_channels, cfg.sparse_count
        self.reduce_conv = Conv1x1("mpg.reduce", 2 * c_mid, c_r, rng)
        self.augment_fc = Linear("mpg.augment", c_r, k * c_r, rng)
        self.token_pe = Parameter("mpg.token_pe", rng.standard_normal((k, c_r)) * 0.02)
        self.blocks = [DecoderBlock(f"mpg.block{i}", c_r, 4 * c_r, rng)
                       for i in range(cfg.blocks)]
        self.lift1 = Linear("mpg.lift1", c_r, c_o, rng)
        self.lift2 = Linear("mpg.lift2", c_o, c_o, rng)
        self.prior_conv = Conv1x1("mpg.prior_reduce", 2 * c_r + 1, c_r, rng)
        self.fem_convs = [Conv1x1(f"mpg.fem{s}", c_r, c_r, rng) for s in cfg.fem_sizes]
        self.fem_merge = Conv1x1("mpg.fem_merge", len(cfg.fem_sizes) * c_r, c_r, rng)
        self.dense_out = Conv1x1("mpg.dense_out", c_r, c_o, rng)

    def params(self):
        out = self.reduce_conv.params() + self.augment_fc.params() + [self.token_pe]
        for b in self.blocks:
            out += b.params()
        out += self.lift1.params() + self.lift2.params()
        out += self.prior_conv.params()
        for c in self.fem_convs:
            out += c.params()
        return out + self.fem_merge.params() + self.dense_out.params()

    def reduce(self, f1: Tensor, f2: Tensor) -> Tensor:
        if f1.shape[1:] != f2.shape[1:]:
            raise DimensionError(f"mid feature grids differ: {f1.shape} vs {f2.shape}")
        return relu(self.reduce_conv(concat([f1, f2], axis=0)))

    def augment(self, prototype: Tensor) -> Tensor:
        k, c_r = self.cfg.sparse_count, self.cfg.reduced_channels
        row = reshape(prototype, (1, c_r))
        return reshape(self.augment_fc(row), (k, c_r))

    def sparse_path(self, e_aug: Tensor, f_q_reduced: Tensor) -> Tensor:
        c_r = self.cfg.reduced_channels
        h, w = f_q_reduced.shape[1:]
        tokens = add(e_aug, self.token_pe.tensor)
        image = add(flatten_map(f_q_reduced),
                    Tensor(sine_positions(h * w, c_r).astype(f_q_reduced.data.dtype)))
        for block in self.blocks:
            tokens = block(tokens, image)
        lifted = self.lift2(relu(self.lift1(tokens)))
        return sine_lift(lifted)

    def fem(self, x: Tensor) -> Tensor:
        sizes = self.cfg.fem_sizes
        h, w = x.shape[1:]
        upsampled = []
        for conv, s in zip(self.fem_convs, sizes):
            y = relu(conv(adaptive_avg_pool(x, (s, s))))
            upsampled.append(bilinear_resize(y, (h, w)))
        merged = [None] * len(sizes)
        carry = None
        for idx in np.argsort(sizes, kind="stable"):   # coarsest grid first
            carry = upsampled[idx] if carry is None else add(upsampled[idx], carry)
            merged[idx] = carry
        return relu(self.fem_merge(concat(merged, axis=0)))

    def dense_path(self, prototype: Tensor, f_q_reduced: Tensor, prior: Tensor) -> Tensor:
        c_r = self.cfg.reduced_channels
        h, w = f_q_reduced.shape[1:]
        tile = broadcast_to(reshape(prototype, (c_r, 1, 1)), (c_r, h, w))
        stacked = concat([tile, f_q_reduced, prior], axis=0)
        return self.dense_out(self.fem(relu(self.prior_conv(stacked))))

    def generate(self, support_feats, support_masks, query_feats) -> PromptOutput:
        f_q_red = self.reduce(query_feats.f1, query_feats.f2)
        pooled = []
        for sf, m in zip(support_feats, support_masks):
            col, empty = masked_avg_pool(self.reduce(sf.f1, sf.f2), m)
            if not empty:
                pooled.append(col)
        if pooled:
            proto = pooled[0]
            for col in pooled[1:]:
                proto = add(proto, col)
            proto = mul(proto, 1.0 / len(pooled))
        else:
            proto = Tensor(np.zeros(self.cfg.reduced_channels, dtype=f_q_red.data.dtype))
        sparse = self.sparse_path(self.augment(proto), f_q_red)
        prior, degenerate = prior_from_features([sf.f3 for sf in support_feats],
                                                support_masks, query_feats.f3)
        dense = self.dense_path(proto, f_q_red, prior)
        return PromptOutput(sparse, dense, prior, degenerate, f_q_red, proto)
