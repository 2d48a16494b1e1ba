import math

import numpy as np
import pytest

from pagroup.affinity import (
    AGGREGATION_MODES,
    OFFSETS,
    SupervisionTarget,
    aggregate,
    aggregate_target_1ch,
    build_supervision,
    encode_pa,
    masked_weighted_bce,
    neighbor_validity,
    perturb,
    pos_weight,
)
from pagroup.masks import InstanceSet, OverlapError, _shift


def block_instance(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


class TestOffsets:
    def test_opposite_channel(self):
        for p, (dy, dx) in enumerate(OFFSETS):
            assert OFFSETS[7 - p] == (-dy, -dx)

    def test_neighbor_validity_corner(self):
        v = neighbor_validity(3, 3)
        # channels pointing up or left are invalid at pixel (0, 0)
        for p, (dy, dx) in enumerate(OFFSETS):
            assert v[p, 0, 0] == (dy != -1 and dx != -1)


class TestEncodePa:
    def test_interior_pixel_all_ones(self):
        inst = InstanceSet(masks=[block_instance(5, 5, 1, 4, 1, 4)], ids=[1])
        aff = encode_pa(inst)
        assert aff[:, 2, 2].tolist() == [1.0] * 8

    def test_boundary_pixel_four_zeros_four_ones(self):
        # 3x3 block with one corner cut: pixel (2, 1) keeps 4 neighbors
        # inside the instance and 4 in the background
        m = block_instance(5, 5, 0, 3, 0, 3)
        m[2, 2] = False
        aff = encode_pa(InstanceSet(masks=[m], ids=[1]))
        vec = aff[:, 2, 1]
        assert sorted(vec.tolist()) == [0.0] * 4 + [1.0] * 4

    def test_corner_pixel_offimage_zero(self):
        inst = InstanceSet(masks=[np.ones((3, 3), dtype=bool)], ids=[1])
        aff = encode_pa(inst)
        for p, (dy, dx) in enumerate(OFFSETS):
            if dy == -1 or dx == -1:
                assert aff[p, 0, 0] == 0.0

    def test_symmetry_invariant(self):
        rng = np.random.Generator(np.random.Philox(1))
        labels = rng.integers(0, 4, (7, 6))
        aff = encode_pa(labels)
        v = neighbor_validity(7, 6)
        for p, (dy, dx) in enumerate(OFFSETS):
            partner = _shift(aff[7 - p], dy, dx, fill=0.0)
            assert np.array_equal(aff[p][v[p]], partner[v[p]])

    def test_binary_values(self):
        rng = np.random.Generator(np.random.Philox(2))
        aff = encode_pa(rng.integers(0, 3, (6, 6)))
        assert set(np.unique(aff).tolist()) <= {0.0, 1.0}

    def test_overlap_rejected(self):
        m = np.ones((2, 2), dtype=bool)
        with pytest.raises(OverlapError):
            encode_pa(InstanceSet(masks=[m, m.copy()], ids=[1, 2]))


class TestBuildSupervision:
    def test_all_background_invalid(self):
        sup = build_supervision(np.zeros((4, 4), dtype=int))
        assert not sup.valid.any()
        assert not sup.weight.any()

    def test_full_cover_all_inimage_valid(self):
        sup = build_supervision(np.ones((4, 4), dtype=int))
        assert np.array_equal(sup.valid, neighbor_validity(4, 4))

    def test_fg_bg_pair_valid_target_zero(self):
        labels = np.zeros((1, 2), dtype=int)
        labels[0, 0] = 1
        sup = build_supervision(labels)
        p_right = OFFSETS.index((0, 1))
        assert sup.valid[p_right, 0, 0]
        assert sup.target[p_right, 0, 0] == 0.0

    def test_weights(self):
        labels = np.array([[1, 1, 0]])
        sup = build_supervision(labels, positive_weight=0.25)
        p_right = OFFSETS.index((0, 1))
        assert sup.weight[p_right, 0, 0] == 0.25  # positive entry
        assert sup.weight[p_right, 0, 1] == 1.0  # negative entry
        assert sup.weight[p_right, 0, 2] == 0.0  # off-image -> invalid


class TestPosWeight:
    def test_equal_counts(self):
        # 1x3 strip [1,1,0]: 2 positive and 2 negative directed entries
        assert pos_weight([np.array([[1, 1, 0]])]) == 1.0

    def test_quarter(self):
        # 1x6 strip with 5 fg: 8 positives, 2 negatives
        assert pos_weight([np.array([[1, 1, 1, 1, 1, 0]])]) == 0.25

    def test_twenty_to_one(self):
        # 1x22 strip with 21 fg: 40 positives, 2 negatives -> 0.05
        labels = np.ones((1, 22), dtype=int)
        labels[0, -1] = 0
        assert pos_weight([labels]) == 0.05

    def test_no_positives_raises(self):
        with pytest.raises(ValueError):
            pos_weight([np.array([[1, 0, 0]])])


class TestMaskedWeightedBce:
    def test_perfect_prediction(self):
        sup = build_supervision(np.array([[1, 1, 0]]))
        loss = masked_weighted_bce(sup.target, sup)
        assert 0.0 <= loss <= -math.log(1.0 - 1e-7) + 1e-15

    def test_single_entry_closed_form(self):
        target = np.zeros((8, 1, 2))
        valid = np.zeros((8, 1, 2), dtype=bool)
        weight = np.zeros((8, 1, 2))
        p = 4
        target[p, 0, 0] = 1.0
        valid[p, 0, 0] = True
        weight[p, 0, 0] = 3.0
        sup = SupervisionTarget(target, valid, weight)
        pred = np.full((8, 1, 2), 0.5)
        assert masked_weighted_bce(pred, sup) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_invalid_entries_contribute_exactly_zero(self):
        labels = np.zeros((6, 6), dtype=int)
        labels[1:4, 1:4] = 1
        sup = build_supervision(labels)
        rng = np.random.Generator(np.random.Philox(5))
        pred = rng.random((8, 6, 6))
        base = masked_weighted_bce(pred, sup)
        mutated = pred.copy()
        mutated[~sup.valid] = rng.random(int((~sup.valid).sum()))
        assert masked_weighted_bce(mutated, sup) == base

    def test_dims_mismatch(self):
        sup = build_supervision(np.array([[1, 0]]))
        with pytest.raises(ValueError):
            masked_weighted_bce(np.zeros((8, 2, 2)), sup)

    def test_all_invalid_raises(self):
        sup = build_supervision(np.zeros((3, 3), dtype=int))
        with pytest.raises(ValueError):
            masked_weighted_bce(np.zeros((8, 3, 3)), sup)


class TestAggregate:
    def test_min_with_one_zero_channel(self):
        aff = np.ones((8, 3, 3))
        aff[4, 1, 1] = 0.0
        edge = aggregate(aff, "min")
        assert edge[1, 1] == 1.0

    def test_all_ones_any_mode(self):
        aff = np.ones((8, 4, 4))
        for mode in AGGREGATION_MODES:
            assert not aggregate(aff, mode).any()

    def test_interior_uniform_instance_mean(self):
        inst = InstanceSet(masks=[np.ones((5, 5), dtype=bool)], ids=[1])
        edge = aggregate(encode_pa(inst), "mean")
        assert edge[2, 2] == 0.0

    def test_min_edge_characterization(self):
        rng = np.random.Generator(np.random.Philox(7))
        labels = rng.integers(0, 3, (9, 8))
        edge = aggregate(encode_pa(labels), "min")
        h, w = labels.shape
        for y in range(h):
            for x in range(w):
                same_all = labels[y, x] > 0
                for dy, dx in OFFSETS:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w:
                        same_all &= labels[ny, nx] == labels[y, x]
                assert (edge[y, x] == 0.0) == bool(same_all)

    def test_monotonicity(self):
        rng = np.random.Generator(np.random.Philox(8))
        aff = rng.random((8, 6, 6))
        raised = aff.copy()
        raised[2, 3, 3] = min(1.0, raised[2, 3, 3] + 0.5)
        for mode in AGGREGATION_MODES:
            assert np.all(aggregate(raised, mode) <= aggregate(aff, mode) + 1e-12)

    def test_validity_restriction(self):
        # with a validity mask, all-invalid pixels carry no boundary signal
        labels = np.zeros((7, 7), dtype=int)
        labels[2:5, 2:5] = 1
        sup = build_supervision(labels)
        edge = aggregate(encode_pa(labels), "min", valid=sup.valid)
        assert edge[0, 0] == 0.0  # background far from the instance
        assert edge[3, 3] == 0.0  # instance interior
        assert edge[2, 2] == 1.0  # instance boundary


class TestAggregateTarget1ch:
    def test_min_equals_boundary_indicator(self):
        labels = np.zeros((6, 7), dtype=int)
        labels[1:4, 2:6] = 1
        edge, _ = aggregate_target_1ch(labels, "min")
        full = aggregate(encode_pa(labels), "min")
        assert np.array_equal(edge, full)
        assert set(np.unique(edge).tolist()) <= {0.0, 1.0}

    def test_all_background_all_invalid(self):
        _, valid = aggregate_target_1ch(np.zeros((4, 4), dtype=int), "min")
        assert not valid.any()

    def test_single_full_instance_zero_edge(self):
        edge, valid = aggregate_target_1ch(np.ones((4, 4), dtype=int), "min")
        assert not edge.any()
        assert valid.all()

    def test_max_rejected(self):
        with pytest.raises(ValueError):
            aggregate_target_1ch(np.ones((4, 4), dtype=int), "max")


class TestPerturb:
    def test_identity(self):
        aff = encode_pa(np.array([[1, 1, 0], [1, 1, 0], [0, 0, 0]]))
        assert np.array_equal(perturb(aff, 0.0, 0, seed=1), aff)

    def test_full_flip_complements_valid_entries(self):
        labels = np.array([[1, 1], [1, 1]])
        aff = encode_pa(labels)
        out = perturb(aff, 1.0, 0, seed=2)
        geom = neighbor_validity(2, 2)
        assert np.array_equal(out[geom], 1.0 - aff[geom])
        assert not out[~geom].any()

    def test_determinism(self):
        rng = np.random.Generator(np.random.Philox(3))
        aff = (rng.random((8, 6, 6)) > 0.5).astype(float)
        a = perturb(aff, 0.3, 1, seed=11)
        b = perturb(aff, 0.3, 1, seed=11)
        assert np.array_equal(a, b)

    def test_symmetry_preserved(self):
        labels = np.random.Generator(np.random.Philox(4)).integers(0, 3, (8, 8))
        out = perturb(encode_pa(labels), 0.2, 1, seed=9)
        geom = neighbor_validity(8, 8)
        for p, (dy, dx) in enumerate(OFFSETS):
            partner = _shift(out[7 - p], dy, dx, fill=0.0)
            assert np.allclose(out[p][geom[p]], partner[geom[p]], atol=1e-12)
