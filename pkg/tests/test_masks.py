import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnetens.masks import (
    Mask,
    MaskError,
    MaskOverlapError,
    MaskSet,
    QuotaError,
    availability,
    claim,
    layer_quota,
    masks_from_arrays,
    random_orthogonal_partition,
    verify,
)

layer_sizes = st.lists(st.integers(1, 60), min_size=1, max_size=4)


class TestPartition:
    def test_ten_weights_five_masks(self):
        ms = random_orthogonal_partition([10], 5, seed=0)
        assert [m.count for m in ms.masks] == [2] * 5
        assert verify(ms).orthogonal

    def test_k_one_is_all_ones(self):
        ms = random_orthogonal_partition([(3, 4), 5], 1, seed=0)
        assert ms.masks[0] == Mask.ones(ms.shapes)

    def test_remainder_goes_to_lowest_indices(self):
        ms = random_orthogonal_partition([7], 5, seed=3)
        assert [m.count for m in ms.masks] == [2, 2, 1, 1, 1]
        assert ms.claimed.count == 7

    def test_deterministic(self):
        a = random_orthogonal_partition([(4, 5), 9], 3, seed=11)
        b = random_orthogonal_partition([(4, 5), 9], 3, seed=11)
        assert all(x == y for x, y in zip(a.masks, b.masks))

    def test_rejects_k_zero(self):
        with pytest.raises(ValueError):
            random_orthogonal_partition([4], 0, seed=0)

    @settings(max_examples=200, deadline=None)
    @given(sizes=layer_sizes, k=st.integers(1, 10), seed=st.integers(0, 2**31))
    def test_partition_properties(self, sizes, k, seed):
        ms = random_orthogonal_partition(sizes, k, seed)
        rep = verify(ms)
        assert rep.orthogonal and rep.ok and rep.max_quota_deviation == 0
        assert rep.coverage == 1.0
        for i, m in enumerate(ms.masks):
            assert list(m.popcounts) == [layer_quota(n, k, i) for n in sizes]


class TestAvailability:
    def test_first_is_all_ones(self):
        ms = random_orthogonal_partition([10, (2, 5)], 5, seed=0)
        assert availability(ms, 0) == Mask.ones(ms.shapes)

    def test_third_subnetwork_sees_sixty_percent(self):
        ms = random_orthogonal_partition([100, (10, 20)], 5, seed=0)
        assert availability(ms, 2).fraction() == pytest.approx(0.6, abs=0)

    def test_last_subnetwork_sees_one_kth(self):
        ms = random_orthogonal_partition([100, (10, 20)], 5, seed=0)
        assert availability(ms, 4).fraction() == 0.2
        assert availability(ms, 4) == ms.masks[4]

    def test_out_of_range(self):
        ms = MaskSet.empty([4], 2)
        with pytest.raises(IndexError):
            availability(ms, 2)

    def test_needs_earlier_masks(self):
        with pytest.raises(MaskError):
            availability(MaskSet.empty([4], 3), 1)

    @settings(max_examples=100, deadline=None)
    @given(sizes=layer_sizes, k=st.integers(2, 8), seed=st.integers(0, 2**31), data=st.data())
    def test_monotone_and_complementary(self, sizes, k, seed, data):
        ms = random_orthogonal_partition(sizes, k, seed)
        i = data.draw(st.integers(0, k - 2))
        a, b = availability(ms, i), availability(ms, i + 1)
        assert (b & ~a).count == 0
        assert (a & ~b) == ms.masks[i]


class TestVerifyAndClaim:
    def test_disjoint_pair_passes(self):
        rep = verify(masks_from_arrays([[np.array([1, 0])], [np.array([0, 1])]]))
        assert rep.orthogonal and rep.lines()[0] == "orthogonality: pass"

    def test_overlap_reported(self):
        rep = verify(masks_from_arrays([[np.array([1, 1])], [np.array([0, 1])]]))
        assert not rep.orthogonal
        assert rep.first_overlap == (0, 1, 0, 1)
        assert rep.lines()[0] == "orthogonality: fail"

    def test_sequential_claims_pass_verify(self, rng):
        shapes = [(6, 7), 11]
        ms = MaskSet.empty(shapes, 4)
        for i in range(4):
            avail = availability(ms, i)
            layers = []
            for a, q in zip(avail.layers, ms.quotas(i)):
                flat = np.zeros(a.size, bool)
                flat[rng.choice(np.flatnonzero(a.ravel()), q, replace=False)] = True
                layers.append(flat.reshape(a.shape))
            ms = claim(ms, i, Mask(layers))
            assert verify(ms).ok
        assert verify(ms).coverage == 1.0

    def test_overlapping_claim_rejected(self):
        ms = claim(MaskSet.empty([4], 2), 0, Mask([np.array([1, 1, 0, 0], bool)]))
        with pytest.raises(MaskOverlapError, match="index 1"):
            claim(ms, 1, Mask([np.array([0, 1, 1, 0], bool)]))

    def test_wrong_quota_rejected(self):
        with pytest.raises(QuotaError):
            claim(MaskSet.empty([4], 2), 0, Mask([np.array([1, 1, 1, 0], bool)]))

    def test_double_claim_rejected(self):
        ms = claim(MaskSet.empty([4], 2), 0, Mask([np.array([1, 1, 0, 0], bool)]))
        with pytest.raises(MaskError):
            claim(ms, 0, Mask([np.array([0, 0, 1, 1], bool)]))

    def test_claim_does_not_mutate(self):
        ms = MaskSet.empty([4], 2)
        claim(ms, 0, Mask([np.array([1, 1, 0, 0], bool)]))
        assert ms.masks[0] is None and ms.claimed.count == 0


class TestMask:
    def test_immutable(self):
        m = Mask([np.array([1, 0], bool)])
        with pytest.raises(ValueError):
            m.layers[0][0] = False

    def test_algebra(self):
        a = Mask([np.array([1, 1, 0, 0], bool)])
        b = Mask([np.array([0, 1, 1, 0], bool)])
        assert (a & b).count == 1 and (a | b).count == 3 and (~a).count == 2
