"""Episode-adaptive feature transformation onto fixed anchor directions.

Per episode and per feature level, foreground/background prototypes are
pooled from the frozen support features, optionally fused with pseudo
query prototypes picked by cycle-consistent matching, and a linear map W
is solved so the normalized prototype columns land on learnable anchor
columns: W * Pm_bar = A_bar. Features from both branches then pass
through W, which cancels episode-specific appearance before the prompt
generator sees anything.

Gradient flows only into the anchors: prototypes come from frozen
features and the pseudoinverse is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from promptseg.config import DpatConfig
from promptseg.encoder import MultiLevelFeatures
from promptseg.tensor import (COSINE_EPS, NORM_TINY, DimensionError, Parameter,
                              Tensor, add, div, matmul, mul, pinv2, reshape,
                              tsqrt, tsum)

NORM_GUARD = 1e-12   # eps added to column norms before dividing


@dataclass
class MatchSet:
    """Bookkeeping of one cycle-consistent selection pass.

    forward[i]: best query position for the i-th region position.
    reverse[i]: best support position for that matched query feature.
    kept: the forward entries whose reverse landed back inside the region.
    """

    forward: list
    reverse: list
    kept: list


@dataclass
class PrototypeMatrix:
    """Foreground/background prototype columns for one feature level.

    A column may be all zeros only when its source region was empty;
    the matching flag records that.
    """

    fg: Tensor
    bg: Tensor
    fg_empty: bool = False
    bg_empty: bool = False

    def stacked(self) -> np.ndarray:
        return np.stack([self.fg.data, self.bg.data], axis=1)


@dataclass
class TransformResult:
    support: list            # transformed MultiLevelFeatures per shot
    query: MultiLevelFeatures
    w: tuple                 # (W1, W2, W3) Tensors
    fused: tuple             # fused PrototypeMatrix per level


def masked_avg_pool(f: Tensor, mask: np.ndarray):
    """Mean feature vector over mask==1 locations. Returns (vector, empty_flag).

    Differentiable in f; the mask is a constant. An empty mask yields a
    zero vector and empty_flag=True.
    """
    if f.ndim != 3:
        raise DimensionError(f"masked_avg_pool expects (c,h,w), got {f.shape}")
    c, h, w = f.shape
    m = np.asarray(mask, dtype=f.data.dtype)
    if m.shape != (h, w):
        raise DimensionError(f"mask shape {m.shape} does not match features {(h, w)}")
    count = float(m.sum())
    if count == 0:
        return Tensor(np.zeros(c, dtype=f.data.dtype)), True
    ff = reshape(f, (c, h * w))
    weights = Tensor(m.reshape(1, h * w))
    pooled = mul(tsum(mul(ff, weights), axis=1), 1.0 / count)
    return pooled, False


def _sim_matrix(fs_flat: np.ndarray, fq_flat: np.ndarray) -> np.ndarray:
    # cos(s_p, q_i) = <s_p, q_i> / (|s_p||q_i| + eps), every pair at once
    na = np.sqrt((fs_flat * fs_flat).sum(axis=0))
    nb = np.sqrt((fq_flat * fq_flat).sum(axis=0))
    return (fs_flat.T @ fq_flat) / (na[:, None] * nb[None, :] + COSINE_EPS)


def _select(sim: np.ndarray, region_flat: np.ndarray) -> MatchSet:
    positions = np.flatnonzero(region_flat)
    if positions.size == 0:
        return MatchSet([], [], [])
    # ties resolve to the lowest linear index (np.argmax picks the first hit)
    forward = np.argmax(sim[positions], axis=1)
    reverse = np.argmax(sim[:, forward], axis=0)
    inside = region_flat[reverse] == 1
    kept = forward[inside]
    return MatchSet(forward.tolist(), reverse.tolist(), kept.tolist())


def cycle_select(f_s: Tensor, f_q: Tensor, region: np.ndarray):
    """Cycle-consistent pseudo prototype from query features.

    Region positions of the support map are matched forward into the
    query by cosine similarity; each match is verified by matching back
    into the support map, and survives only if the round trip lands
    inside the region. The pseudo prototype is the mean query feature
    over the kept matches (with multiplicity). Operates on frozen data,
    so the result carries no gradient.
    """
    if f_s.shape != f_q.shape:
        raise DimensionError(f"support/query feature shapes differ: {f_s.shape} vs {f_q.shape}")
    c, h, w = f_s.shape
    reg = np.asarray(region).reshape(h * w)
    fs_flat = f_s.data.reshape(c, h * w)
    fq_flat = f_q.data.reshape(c, h * w)
    matches = _select(_sim_matrix(fs_flat, fq_flat), reg)
    if not matches.kept:
        return matches, Tensor(np.zeros(c, dtype=f_q.data.dtype)), True
    proto = fq_flat[:, matches.kept].mean(axis=1)
    return matches, Tensor(proto), False


def pooled_union_prototype(f_q: Tensor, kept_sets) -> tuple[Tensor, bool]:
    """Multi-shot variant: pool the query features over the union of kept positions."""
    union = sorted(set().union(*[set(k) for k in kept_sets])) if kept_sets else []
    c = f_q.shape[0]
    if not union:
        return Tensor(np.zeros(c, dtype=f_q.data.dtype)), True
    fq_flat = f_q.data.reshape(c, -1)
    return Tensor(fq_flat[:, union].mean(axis=1)), False


def fuse_prototypes(ps: PrototypeMatrix, pq: PrototypeMatrix) -> PrototypeMatrix:
    """Columnwise sum of support and pseudo prototypes.

    An empty pseudo column falls back to the support column alone, so a
    failed cycle match can never poison the fused matrix.
    """
    fg = ps.fg if pq.fg_empty else add(ps.fg, pq.fg)
    bg = ps.bg if pq.bg_empty else add(ps.bg, pq.bg)
    return PrototypeMatrix(fg, bg,
                           fg_empty=ps.fg_empty and pq.fg_empty,
                           bg_empty=ps.bg_empty and pq.bg_empty)


def normalize_columns(arr: np.ndarray) -> np.ndarray:
    """Unit columns with the same eps guard compute_w applies (float64)."""
    a = arr.astype(np.float64)
    norms = np.sqrt((a * a).sum(axis=0))
    return a / (norms + NORM_GUARD)


def compute_w(pm: PrototypeMatrix, anchor: Tensor, reg_rel: float = 1e-12) -> Tensor:
    """Solve W * Pm_bar = A_bar via the regularized left pseudoinverse.

    Pm columns are detached constants normalized at float64; the anchor
    normalization stays in the graph so gradient reaches the anchor (and
    only the anchor). lambda = reg_rel * trace(PtP) / 2 is always applied.
    """
    if anchor.ndim != 2 or anchor.shape[1] != 2:
        raise DimensionError(f"anchor must be (c,2), got {anchor.shape}")
    p_bar = normalize_columns(pm.stacked())
    if p_bar.shape[0] != anchor.shape[0]:
        raise DimensionError(f"prototype channels {p_bar.shape[0]} != anchor channels {anchor.shape[0]}")
    lam = reg_rel * float(np.trace(p_bar.T @ p_bar)) / 2.0
    p_pinv = pinv2(Tensor(p_bar, dtype=np.float64), lam=lam)
    norms = tsqrt(add(tsum(mul(anchor, anchor), axis=0, keepdims=True), NORM_TINY))
    a_bar = div(anchor, add(norms, NORM_GUARD))
    return matmul(a_bar, Tensor(p_pinv.data.astype(anchor.data.dtype)))


def apply_w(w: Tensor, f: Tensor) -> Tensor:
    """Map every location of (c,h,w) features through W."""
    c, h, wd = f.shape
    return reshape(matmul(w, reshape(f, (c, h * wd))), (c, h, wd))


def support_prototypes(level_feats, level_masks) -> PrototypeMatrix:
    """Per-shot masked average pooling, averaged over the shots that have
    a non-empty region at feature resolution."""
    fg_cols, bg_cols = [], []
    for f, m in zip(level_feats, level_masks):
        fg, fg_empty = masked_avg_pool(f, m)
        bg, bg_empty = masked_avg_pool(f, 1.0 - m)
        if not fg_empty:
            fg_cols.append(fg)
        if not bg_empty:
            bg_cols.append(bg)

    def avg(cols, c, dtype):
        if not cols:
            return Tensor(np.zeros(c, dtype=dtype)), True
        acc = cols[0]
        for col in cols[1:]:
            acc = add(acc, col)
        return mul(acc, 1.0 / len(cols)), False

    c = level_feats[0].shape[0]
    dtype = level_feats[0].data.dtype
    fg, fg_empty = avg(fg_cols, c, dtype)
    bg, bg_empty = avg(bg_cols, c, dtype)
    return PrototypeMatrix(fg, bg, fg_empty, bg_empty)


def pseudo_prototypes_ccs(level_feats, level_masks, f_q: Tensor) -> PrototypeMatrix:
    """Cycle-consistent pseudo prototypes; multi-shot kept sets are unioned."""
    if len(level_feats) == 1:
        _, fg, fg_empty = cycle_select(level_feats[0], f_q, level_masks[0])
        _, bg, bg_empty = cycle_select(level_feats[0], f_q, 1.0 - level_masks[0])
        return PrototypeMatrix(fg, bg, fg_empty, bg_empty)
    fg_sets, bg_sets = [], []
    for f, m in zip(level_feats, level_masks):
        fg_match, _, _ = cycle_select(f, f_q, m)
        bg_match, _, _ = cycle_select(f, f_q, 1.0 - m)
        fg_sets.append(fg_match.kept)
        bg_sets.append(bg_match.kept)
    fg, fg_empty = pooled_union_prototype(f_q, fg_sets)
    bg, bg_empty = pooled_union_prototype(f_q, bg_sets)
    return PrototypeMatrix(fg, bg, fg_empty, bg_empty)


def pm_map_prototypes(coarse: np.ndarray, f_q: Tensor) -> PrototypeMatrix:
    """Pseudo prototypes from a coarse query prediction instead of matching.

    coarse holds probabilities at feature resolution; 0.5 is the cut.
    An all-one or all-zero pseudo mask leaves the corresponding column
    empty-flagged, which fuse_prototypes turns into support-only.
    """
    pseudo = (np.asarray(coarse) > 0.5).astype(np.float64)
    fg, fg_empty = masked_avg_pool(f_q, pseudo)
    bg, bg_empty = masked_avg_pool(f_q, 1.0 - pseudo)
    return PrototypeMatrix(fg.detach(), bg.detach(), fg_empty, bg_empty)


def transform_episode(support_feats, support_masks, query_feats: MultiLevelFeatures,
                      anchor_mid: Parameter, anchor_high: Parameter,
                      cfg: DpatConfig, pseudo_override=None) -> TransformResult:
    """Build W per level and push support and query features through it.

    support_masks are binary arrays at feature resolution, one per shot.
    Levels 1 and 2 share the mid anchor; level 3 uses the high anchor.
    pseudo_override injects precomputed pseudo prototypes (second pass of
    the pm-map mode); otherwise ccs_mode decides how pseudos are built.
    """
    ws, fused_all = [], []
    s_levels = [[] for _ in support_feats]
    q_levels = []
    for idx in range(3):
        level_feats = [sf.levels[idx] for sf in support_feats]
        f_q = query_feats.levels[idx]
        anchor = anchor_mid if idx < 2 else anchor_high
        ps = support_prototypes(level_feats, support_masks)
        if pseudo_override is not None:
            pq = pseudo_override[idx]
        elif cfg.ccs_mode == "none":
            c = f_q.shape[0]
            pq = PrototypeMatrix(Tensor(np.zeros(c, dtype=f_q.data.dtype)),
                                 Tensor(np.zeros(c, dtype=f_q.data.dtype)),
                                 fg_empty=True, bg_empty=True)
        else:
            pq = pseudo_prototypes_ccs(level_feats, support_masks, f_q)
        fused = fuse_prototypes(ps, pq)
        w = compute_w(fused, anchor.tensor, cfg.pinv_reg_rel)
        ws.append(w)
        fused_all.append(fused)
        for shot, f in enumerate(level_feats):
            s_levels[shot].append(apply_w(w, f))
        q_levels.append(apply_w(w, f_q))
    support_out = [MultiLevelFeatures(*lv, source=support_feats[i].source)
                   for i, lv in enumerate(s_levels)]
    query_out = MultiLevelFeatures(*q_levels, source=query_feats.source)
    return TransformResult(support_out, query_out, tuple(ws), tuple(fused_all))
