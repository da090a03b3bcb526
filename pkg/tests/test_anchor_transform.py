"""Anchor transformation tests.

The cycle-consistent selection is checked against a brute-force oracle
that loops over every position pair with scalar cosine math, and the
anchor mapping is checked by its defining residual.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from promptseg.anchor_transform import (MatchSet, PrototypeMatrix, apply_w,
                                        compute_w, cycle_select,
                                        fuse_prototypes, masked_avg_pool,
                                        normalize_columns, pm_map_prototypes,
                                        pooled_union_prototype,
                                        pseudo_prototypes_ccs,
                                        support_prototypes, transform_episode)
from promptseg.config import DpatConfig
from promptseg.encoder import MultiLevelFeatures
from promptseg.tensor import Parameter, Tensor, tsum, use_dtype


def scalar_cos(u, v):
    num = sum(float(a) * float(b) for a, b in zip(u, v))
    nu = math.sqrt(sum(float(a) ** 2 for a in u))
    nv = math.sqrt(sum(float(b) ** 2 for b in v))
    return num / (nu * nv + 1e-8)


def brute_cycle_select(fs, fq, region):
    """Independent double-argmax reference, pure python loops."""
    c, h, w = fs.shape
    fsf = fs.reshape(c, h * w)
    fqf = fq.reshape(c, h * w)
    reg = region.reshape(h * w)
    forward, reverse, kept = [], [], []
    for p in range(h * w):
        if reg[p] != 1:
            continue
        best_i, best_v = 0, -math.inf
        for i in range(h * w):
            v = scalar_cos(fsf[:, p], fqf[:, i])
            if v > best_v:
                best_v, best_i = v, i
        forward.append(best_i)
    for i in forward:
        best_j, best_v = 0, -math.inf
        for j in range(h * w):
            v = scalar_cos(fqf[:, i], fsf[:, j])
            if v > best_v:
                best_v, best_j = v, j
        reverse.append(best_j)
    kept = [i for i, j in zip(forward, reverse) if reg[j] == 1]
    if kept:
        proto = fqf[:, kept].mean(axis=1)
    else:
        proto = np.zeros(c)
    return MatchSet(forward, reverse, kept), proto


def random_instance(rng, c=None, h=None, w=None):
    c = c or int(rng.integers(1, 9))
    h = h or int(rng.integers(1, 7))
    w = w or int(rng.integers(1, 7))
    fs = rng.standard_normal((c, h, w))
    fq = rng.standard_normal((c, h, w))
    region = (rng.random((h, w)) < 0.4).astype(np.float64)
    return fs, fq, region


class TestCycleSelect:
    def test_hand_checkable_chain(self):
        # support p0 points along e1; q0 is its only near-parallel query
        # vector, and the trip back lands on p0 again, so q0 is kept
        fs = np.zeros((3, 2, 2))
        fs[:, 0, 0] = (1.0, 0.0, 0.0)
        fs[:, 0, 1] = (0.0, 1.0, 0.0)
        fs[:, 1, 0] = (0.0, 0.0, 1.0)
        fs[:, 1, 1] = (0.0, 1.0, 1.0)
        fq = np.zeros((3, 2, 2))
        fq[:, 0, 0] = (0.9, 0.05, 0.0)
        fq[:, 0, 1] = (0.0, 0.8, 0.1)
        fq[:, 1, 0] = (0.1, 0.0, 0.7)
        fq[:, 1, 1] = (0.0, 0.5, 0.5)
        region = np.array([[1.0, 0.0], [0.0, 0.0]])
        matches, proto, empty = cycle_select(Tensor(fs), Tensor(fq), region)
        assert matches == MatchSet([0], [0], [0])
        assert not empty
        np.testing.assert_allclose(proto.data, fq[:, 0, 0])

    def test_cycle_violation_drops_match(self):
        # q1 is the best match for p0, but q1 itself prefers p1 which sits
        # outside the region, so nothing survives
        fs = np.zeros((2, 1, 2))
        fs[:, 0, 0] = (1.0, 0.2)
        fs[:, 0, 1] = (0.0, 1.0)
        fq = np.zeros((2, 1, 2))
        fq[:, 0, 0] = (-1.0, -1.0)
        fq[:, 0, 1] = (0.3, 1.0)
        region = np.array([[1.0, 0.0]])
        matches, proto, empty = cycle_select(Tensor(fs), Tensor(fq), region)
        assert matches.forward == [1]
        assert matches.reverse == [1]
        assert matches.kept == []
        assert empty
        np.testing.assert_array_equal(proto.data, np.zeros(2))

    def test_matches_brute_force_bulk(self):
        rng = np.random.default_rng(404)
        for _ in range(40):
            fs, fq, region = random_instance(rng)
            got, proto, empty = cycle_select(Tensor(fs), Tensor(fq), region)
            want, want_proto = brute_cycle_select(fs, fq, region)
            assert got == want
            assert empty == (len(want.kept) == 0)
            np.testing.assert_allclose(proto.data, want_proto, atol=1e-12)

    def test_empty_region(self):
        rng = np.random.default_rng(1)
        fs, fq, _ = random_instance(rng, c=4, h=3, w=3)
        matches, proto, empty = cycle_select(Tensor(fs), Tensor(fq), np.zeros((3, 3)))
        assert matches == MatchSet([], [], [])
        assert empty
        np.testing.assert_array_equal(proto.data, np.zeros(4))

    def test_tie_breaks_to_first_index(self):
        # all-identical features: every cosine is 1.0, argmax must pick
        # index 0 for both directions
        fs = np.ones((2, 2, 2))
        fq = np.ones((2, 2, 2))
        region = np.array([[0.0, 1.0], [1.0, 0.0]])
        matches, _, _ = cycle_select(Tensor(fs), Tensor(fq), region)
        assert matches.forward == [0, 0]
        assert matches.reverse == [0, 0]
        assert matches.kept == []   # position 0 is outside the region

    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 50.0))
    @settings(max_examples=25)
    def test_query_scale_leaves_matches_alone(self, seed, scale):
        rng = np.random.default_rng(seed)
        fs, fq, region = random_instance(rng)
        base, _, _ = cycle_select(Tensor(fs), Tensor(fq), region)
        scaled, _, _ = cycle_select(Tensor(fs), Tensor(fq * scale), region)
        assert base == scaled

    def test_multi_shot_union(self):
        rng = np.random.default_rng(77)
        fq = rng.standard_normal((3, 4, 4))
        shots = [rng.standard_normal((3, 4, 4)) for _ in range(2)]
        masks = [(rng.random((4, 4)) < 0.5).astype(np.float64) for _ in range(2)]
        kept_sets = []
        for fs, m in zip(shots, masks):
            ms, _ = brute_cycle_select(fs, fq, m)
            kept_sets.append(ms.kept)
        union = sorted(set(kept_sets[0]) | set(kept_sets[1]))
        proto, empty = pooled_union_prototype(Tensor(fq), kept_sets)
        assert not empty
        np.testing.assert_allclose(proto.data, fq.reshape(3, -1)[:, union].mean(axis=1))
        pm = pseudo_prototypes_ccs([Tensor(s) for s in shots], masks, Tensor(fq))
        np.testing.assert_allclose(pm.fg.data, proto.data)


class TestMaskedAvgPool:
    def test_hand_case(self):
        f = np.zeros((2, 2, 2))
        f[0] = [[1.0, 3.0], [5.0, 7.0]]
        f[1] = [[2.0, 4.0], [6.0, 8.0]]
        mask = np.array([[1.0, 1.0], [0.0, 0.0]])
        pooled, empty = masked_avg_pool(Tensor(f), mask)
        assert not empty
        np.testing.assert_allclose(pooled.data, [2.0, 3.0])

    def test_empty_mask_flags(self):
        pooled, empty = masked_avg_pool(Tensor(np.ones((3, 2, 2))), np.zeros((2, 2)))
        assert empty
        np.testing.assert_array_equal(pooled.data, np.zeros(3))

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(12)
        f = rng.standard_normal((5, 6, 7))
        mask = (rng.random((6, 7)) < 0.5).astype(np.float64)
        pooled, _ = masked_avg_pool(Tensor(f), mask)
        want = (f * mask).sum(axis=(1, 2)) / mask.sum()
        np.testing.assert_allclose(pooled.data, want, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        mask = np.array([[1.0, 0.0], [1.0, 1.0]])
        r = rng.standard_normal(3)

        def build(ts):
            pooled, _ = masked_avg_pool(ts["f"], mask)
            return tsum(pooled * Tensor(r))

        check_gradients(build, {"f": rng.standard_normal((3, 2, 2))}, rng=rng)

    def test_shot_average_skips_empty_shots(self):
        rng = np.random.default_rng(5)
        f1 = Tensor(rng.standard_normal((3, 2, 2)))
        f2 = Tensor(rng.standard_normal((3, 2, 2)))
        m1 = np.array([[1.0, 0.0], [0.0, 0.0]])
        m2 = np.zeros((2, 2))
        pm = support_prototypes([f1, f2], [m1, m2])
        np.testing.assert_allclose(pm.fg.data, f1.data[:, 0, 0])
        assert not pm.fg_empty
        # background is present in both shots, so it averages over both
        b1 = (f1.data * (1 - m1)).sum(axis=(1, 2)) / 3.0
        b2 = f2.data.mean(axis=(1, 2))
        np.testing.assert_allclose(pm.bg.data, (b1 + b2) / 2.0, atol=1e-12)


class TestFusion:
    def test_columnwise_sum(self):
        ps = PrototypeMatrix(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0])))
        pq = PrototypeMatrix(Tensor(np.array([10.0, 20.0])), Tensor(np.array([30.0, 40.0])))
        fused = fuse_prototypes(ps, pq)
        np.testing.assert_array_equal(fused.fg.data, [11.0, 22.0])
        np.testing.assert_array_equal(fused.bg.data, [33.0, 44.0])
        assert not fused.fg_empty and not fused.bg_empty

    def test_empty_pseudo_falls_back_to_support(self):
        ps = PrototypeMatrix(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0])))
        pq = PrototypeMatrix(Tensor(np.zeros(2)), Tensor(np.array([5.0, 5.0])),
                             fg_empty=True)
        fused = fuse_prototypes(ps, pq)
        np.testing.assert_array_equal(fused.fg.data, ps.fg.data)
        np.testing.assert_array_equal(fused.bg.data, [8.0, 9.0])


def random_prototype_matrix(rng, c):
    return PrototypeMatrix(Tensor(rng.standard_normal(c)), Tensor(rng.standard_normal(c)))


class TestComputeW:
    def test_residual_at_64bit(self):
        rng = np.random.default_rng(21)
        with use_dtype(np.float64):
            for _ in range(25):
                c = int(rng.integers(2, 33))
                pm = random_prototype_matrix(rng, c)
                anchor = Tensor(rng.standard_normal((c, 2)))
                w = compute_w(pm, anchor)
                p_bar = normalize_columns(pm.stacked())
                a_bar = normalize_columns(anchor.data)
                residual = np.abs(w.data @ p_bar - a_bar).max()
                assert residual <= 1e-8

    def test_anchors_equal_prototypes_give_identity_on_span(self):
        rng = np.random.default_rng(8)
        with use_dtype(np.float64):
            pm = random_prototype_matrix(rng, 6)
            anchor = Tensor(normalize_columns(pm.stacked()))
            w = compute_w(pm, anchor)
            p_bar = normalize_columns(pm.stacked())
            np.testing.assert_allclose(w.data @ p_bar, p_bar, atol=1e-9)

    def test_fg_prototype_lands_on_fg_anchor(self):
        rng = np.random.default_rng(9)
        with use_dtype(np.float64):
            pm = random_prototype_matrix(rng, 16)
            anchor = Tensor(rng.standard_normal((16, 2)))
            w = compute_w(pm, anchor)
            p_bar = normalize_columns(pm.stacked())
            a_bar = normalize_columns(anchor.data)
            mapped = w.data @ p_bar[:, 0]
            cos = mapped @ a_bar[:, 0] / (np.linalg.norm(mapped) * np.linalg.norm(a_bar[:, 0]))
            assert cos >= 0.999

    def test_gradient_reaches_anchor_only(self):
        rng = np.random.default_rng(10)
        pm = PrototypeMatrix(Tensor(rng.standard_normal(4), requires_grad=True),
                             Tensor(rng.standard_normal(4), requires_grad=True))
        anchor = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        w = compute_w(pm, anchor)
        tsum(w).backward()
        assert anchor.grad is not None
        assert pm.fg.grad is None and pm.bg.grad is None

    def test_anchor_gradient_against_finite_differences(self):
        rng = np.random.default_rng(11)
        pm_data = rng.standard_normal((5, 2))
        r = rng.standard_normal((5, 5))

        def build(ts):
            pm = PrototypeMatrix(Tensor(pm_data[:, 0]), Tensor(pm_data[:, 1]))
            return tsum(compute_w(pm, ts["anchor"]) * Tensor(r))

        check_gradients(build, {"anchor": rng.standard_normal((5, 2))}, rng=rng)

    def test_bad_anchor_shape_rejected(self):
        pm = random_prototype_matrix(np.random.default_rng(0), 4)
        with pytest.raises(Exception):
            compute_w(pm, Tensor(np.zeros((4, 3))))


class TestPmMapPrototypes:
    def test_threshold_and_pool(self):
        rng = np.random.default_rng(13)
        fq = rng.standard_normal((3, 4, 4))
        coarse = rng.random((4, 4))
        pm = pm_map_prototypes(coarse, Tensor(fq))
        sel = (coarse > 0.5).astype(np.float64)
        np.testing.assert_allclose(pm.fg.data, (fq * sel).sum(axis=(1, 2)) / sel.sum(), atol=1e-12)
        np.testing.assert_allclose(pm.bg.data, (fq * (1 - sel)).sum(axis=(1, 2)) / (1 - sel).sum(), atol=1e-12)

    def test_saturated_mask_flags_empty(self):
        fq = Tensor(np.ones((2, 2, 2)))
        pm = pm_map_prototypes(np.ones((2, 2)), fq)
        assert pm.bg_empty and not pm.fg_empty
        pm = pm_map_prototypes(np.zeros((2, 2)), fq)
        assert pm.fg_empty and not pm.bg_empty


def tiny_episode(rng, c=(6, 6, 4), hw=4, shots=1):
    def feats():
        return MultiLevelFeatures(Tensor(rng.standard_normal((c[0], hw, hw))),
                                  Tensor(rng.standard_normal((c[1], hw, hw))),
                                  Tensor(rng.standard_normal((c[2], hw, hw))))
    support = [feats() for _ in range(shots)]
    masks = [(rng.random((hw, hw)) < 0.5).astype(np.float64) for _ in range(shots)]
    query = feats()
    return support, masks, query


class TestTransformEpisode:
    def test_shapes_and_anchor_residuals(self):
        rng = np.random.default_rng(31)
        with use_dtype(np.float64):
            support, masks, query = tiny_episode(rng)
            a_mid = Parameter("a_mid", Tensor(rng.standard_normal((6, 2)), requires_grad=True))
            a_high = Parameter("a_high", Tensor(rng.standard_normal((4, 2)), requires_grad=True))
            out = transform_episode(support, masks, query, a_mid, a_high, DpatConfig())
            assert out.query.f1.shape == (6, 4, 4)
            assert out.query.f3.shape == (4, 4, 4)
            for idx, (w, fused) in enumerate(zip(out.w, out.fused)):
                anchor = a_mid.tensor if idx < 2 else a_high.tensor
                p_bar = normalize_columns(fused.stacked())
                a_bar = normalize_columns(anchor.data)
                assert np.abs(w.data @ p_bar - a_bar).max() <= 1e-8

    def test_transformed_features_equal_w_times_features(self):
        rng = np.random.default_rng(32)
        support, masks, query = tiny_episode(rng)
        a_mid = Parameter("a_mid", Tensor(rng.standard_normal((6, 2)), requires_grad=True))
        a_high = Parameter("a_high", Tensor(rng.standard_normal((4, 2)), requires_grad=True))
        out = transform_episode(support, masks, query, a_mid, a_high, DpatConfig())
        for idx in range(3):
            w = out.w[idx].data
            f = query.levels[idx].data
            want = (w @ f.reshape(f.shape[0], -1)).reshape(f.shape)
            np.testing.assert_allclose(out.query.levels[idx].data, want, rtol=1e-6)
            s = support[0].levels[idx].data
            want_s = (w @ s.reshape(s.shape[0], -1)).reshape(s.shape)
            np.testing.assert_allclose(out.support[0].levels[idx].data, want_s, rtol=1e-6)

    def test_mode_none_matches_support_only_fusion(self):
        rng = np.random.default_rng(33)
        support, masks, query = tiny_episode(rng)
        a_mid = Parameter("a_mid", Tensor(rng.standard_normal((6, 2)), requires_grad=True))
        a_high = Parameter("a_high", Tensor(rng.standard_normal((4, 2)), requires_grad=True))
        out = transform_episode(support, masks, query, a_mid, a_high,
                                DpatConfig(ccs_mode="none"))
        for idx in range(3):
            level_feats = [sf.levels[idx] for sf in support]
            ps = support_prototypes(level_feats, masks)
            np.testing.assert_array_equal(out.fused[idx].fg.data, ps.fg.data)
            np.testing.assert_array_equal(out.fused[idx].bg.data, ps.bg.data)

    def test_pseudo_override_is_used(self):
        rng = np.random.default_rng(34)
        support, masks, query = tiny_episode(rng)
        a_mid = Parameter("a_mid", Tensor(rng.standard_normal((6, 2)), requires_grad=True))
        a_high = Parameter("a_high", Tensor(rng.standard_normal((4, 2)), requires_grad=True))
        override = []
        for idx in range(3):
            c = query.levels[idx].shape[0]
            override.append(PrototypeMatrix(Tensor(np.full(c, 2.0)), Tensor(np.full(c, -2.0))))
        out = transform_episode(support, masks, query, a_mid, a_high,
                                DpatConfig(ccs_mode="pm-map"), pseudo_override=override)
        for idx in range(3):
            level_feats = [sf.levels[idx] for sf in support]
            ps = support_prototypes(level_feats, masks)
            np.testing.assert_allclose(out.fused[idx].fg.data, ps.fg.data + 2.0, atol=1e-6)

    def test_gradient_flows_to_anchors(self):
        rng = np.random.default_rng(35)
        support, masks, query = tiny_episode(rng)
        a_mid = Parameter("a_mid", Tensor(rng.standard_normal((6, 2)), requires_grad=True))
        a_high = Parameter("a_high", Tensor(rng.standard_normal((4, 2)), requires_grad=True))
        out = transform_episode(support, masks, query, a_mid, a_high, DpatConfig())
        loss = tsum(out.query.f1) + tsum(out.query.f3) + tsum(out.support[0].f2)
        loss.backward()
        assert a_mid.tensor.grad is not None
        assert a_high.tensor.grad is not None
        assert np.abs(a_mid.tensor.grad).max() > 0

    def test_five_shot_runs(self):
        rng = np.random.default_rng(36)
        support, masks, query = tiny_episode(rng, shots=5)
        a_mid = Parameter("a_mid", Tensor(rng.standard_normal((6, 2)), requires_grad=True))
        a_high = Parameter("a_high", Tensor(rng.standard_normal((4, 2)), requires_grad=True))
        out = transform_episode(support, masks, query, a_mid, a_high, DpatConfig())
        assert len(out.support) == 5
        assert out.support[4].f3.shape == (4, 4, 4)
