"""Pooling formulas, mass / rank accuracy and score aggregation."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xaibench.masks import BitMask
from xaibench.metrics import (
    POOLING_NAMES,
    EmptyGT,
    EmptyInput,
    ZeroHeatmap,
    aggregate,
    canonical_pooling,
    mass_accuracy,
    pool,
    rank_accuracy,
    top_k,
)


def brute_mass(h, gt):
    inside = total = 0.0
    for i in range(h.shape[0]):
        for j in range(h.shape[1]):
            total += h[i, j]
            if gt[i, j]:
                inside += h[i, j]
    return inside / total


def brute_rank(h, gt):
    """Sort pixels by (-value, row, col) with a plain sort and count hits among the top K."""
    pixels = [(-h[i, j], i, j) for i in range(h.shape[0]) for j in range(h.shape[1])]
    pixels.sort()
    k = int(gt.sum())
    return sum(1 for _, i, j in pixels[:k] if gt[i, j]) / k


def random_pair(rng, max_side=16):
    hgt, wid = rng.integers(1, max_side + 1, size=2)
    h = rng.random((hgt, wid)) ** 3
    h[rng.random((hgt, wid)) < 0.2] = 0.0
    if rng.random() < 0.3:
        h = np.round(h * 4) / 4  # plenty of ties
    gt = rng.random((hgt, wid)) < rng.uniform(0.05, 0.8)
    if not gt.any():
        gt[rng.integers(hgt), rng.integers(wid)] = True
    if not h.any():
        h[0, 0] = 1.0
    return h, gt


class TestPool:
    r = np.array([1.0, -2.0, 2.0]).reshape(3, 1, 1)

    @pytest.mark.parametrize("name, value", [
        ("sum_pos", 1), ("l1_norm", 5), ("max_norm", 2), ("l2_norm", 3), ("l2_norm_sq", 9),
        ("pos_sum", 3), ("sum_abs", 1), ("pos_max_norm", 2), ("pos_l2_norm", math.sqrt(5)),
        ("pos_l2_norm_sq", 5),
    ])
    def test_formulas(self, name, value):
        assert pool(self.r, name)[0, 0] == pytest.approx(value, abs=1e-15)

    def test_ten_techniques(self):
        assert len(POOLING_NAMES) == 10

    def test_zero(self):
        for name in POOLING_NAMES:
            np.testing.assert_array_equal(pool(np.zeros((3, 4, 5)), name), 0.0)

    def test_single_channel(self):
        r = np.random.default_rng(0).random((1, 6, 6))
        ref = pool(r, "sum_pos")
        for name in ("l1_norm", "max_norm", "pos_sum"):
            np.testing.assert_array_equal(pool(r, name), ref)

    def test_comma_spelling(self):
        assert canonical_pooling("pos,l2-norm-sq") == "pos_l2_norm_sq"
        assert canonical_pooling("max-norm") == "max_norm"
        with pytest.raises(KeyError):
            canonical_pooling("median")

    def test_none_passes_2d(self):
        h = np.ones((4, 4))
        np.testing.assert_array_equal(pool(h, "none"), h)
        with pytest.raises(ValueError):
            pool(np.ones((3, 4, 4)), "none")

    @settings(max_examples=50)
    @given(r=arrays(float, (3, 4, 5), elements=st.floats(-10, 10)), perm=st.permutations([0, 1, 2]))
    def test_channel_permutation(self, r, perm):
        for name in POOLING_NAMES:
            out = pool(r, name)
            assert np.all(out >= 0)
            np.testing.assert_allclose(pool(r[list(perm)], name), out, rtol=1e-12, atol=1e-12)


class TestMass:
    def test_uniform(self):
        gt = np.zeros((4, 4), bool)
        gt[:2, :2] = True
        assert mass_accuracy(np.ones((4, 4)), gt) == 0.25

    def test_inside_only(self):
        gt = np.zeros((5, 5), bool)
        gt[1:3, 2:4] = True
        h = np.where(gt, np.random.default_rng(1).random((5, 5)), 0.0)
        assert mass_accuracy(h, BitMask(gt)) == 1.0

    def test_errors(self):
        with pytest.raises(EmptyGT):
            mass_accuracy(np.ones((3, 3)), np.zeros((3, 3), bool))
        with pytest.raises(ZeroHeatmap):
            mass_accuracy(np.zeros((3, 3)), np.ones((3, 3), bool))
        with pytest.raises(ValueError):
            mass_accuracy(-np.ones((3, 3)), np.ones((3, 3), bool))
        with pytest.raises(ValueError):
            mass_accuracy(np.ones((3, 3)), np.ones((3, 4), bool))


class TestRank:
    def test_exact_top(self):
        h = np.arange(16, dtype=float).reshape(4, 4)
        gt = h >= 12
        assert rank_accuracy(h, gt) == 1.0

    def test_disjoint(self):
        h = np.arange(16, dtype=float).reshape(4, 4)
        assert rank_accuracy(h, h < 4) == 0.0

    def test_ties_row_major(self):
        gt = np.zeros((4, 4), bool)
        gt.flat[:5] = True
        assert rank_accuracy(np.ones((4, 4)), gt) == 1.0
        assert list(top_k(np.ones((2, 2)), 3)) == [0, 1, 2]

    def test_support_inside_gt(self):
        gt = np.zeros((6, 6), bool)
        gt[2:4, 1:5] = True
        h = np.where(gt, 1.0 + np.random.default_rng(2).random((6, 6)), 0.0)
        assert rank_accuracy(h, gt) == 1.0

    def test_errors(self):
        with pytest.raises(ZeroHeatmap):
            rank_accuracy(np.zeros((3, 3)), np.ones((3, 3), bool))
        with pytest.raises(EmptyGT):
            rank_accuracy(np.ones((3, 3)), np.zeros((3, 3), bool))


def test_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        h, gt = random_pair(rng)
        assert rank_accuracy(h, gt) == brute_rank(h, gt)
        assert abs(mass_accuracy(h, gt) - brute_mass(h, gt)) < 1e-12


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1), c=st.sampled_from([1e-6, 1.0, 1e6]))
def test_scale_invariance(seed, c):
    h, gt = random_pair(np.random.default_rng(seed))
    assert rank_accuracy(h * c, gt) == rank_accuracy(h, gt)
    assert abs(mass_accuracy(h * c, gt) - mass_accuracy(h, gt)) < 1e-12


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1))
def test_bounds_and_superset(seed):
    rng = np.random.default_rng(seed)
    h, gt = random_pair(rng)
    bigger = gt | (rng.random(gt.shape) < 0.3)
    for metric in (mass_accuracy, rank_accuracy):
        assert 0.0 <= metric(h, gt) <= 1.0
    assert mass_accuracy(h, gt) <= mass_accuracy(h, bigger)


class TestAggregate:
    def test_single(self):
        assert aggregate([0.5]) == {"mean": 0.5, "std": 0.0, "median": 0.5, "count": 1}

    def test_lower_median(self):
        assert aggregate([0.0, 1.0]) == {"mean": 0.5, "std": 0.5, "median": 0.0, "count": 2}

    def test_two_pass_reference(self):
        x = np.random.default_rng(7).random(1000)
        mean = sum(x) / len(x)
        std = math.sqrt(sum((v - mean) ** 2 for v in x) / len(x))
        out = aggregate(list(x))
        assert abs(out["mean"] - mean) < 1e-12
        assert abs(out["std"] - std) < 1e-12
        assert out["median"] == sorted(x)[499]

    def test_empty(self):
        with pytest.raises(EmptyInput):
            aggregate([])
