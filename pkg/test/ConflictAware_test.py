"""
    The MIT License (MIT)

    Copyright (c) 2023 pkjmesra

    Permission is hereby granted, free of charge, to any person obtaining a copy
    of this software and associated documentation files (the "Software"), to deal
    in the Software without restriction, including without limitation the rights
    to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
    copies of the Software, and to permit persons to whom the Software is
    furnished to do so, subject to the following conditions:

    The above copyright notice and this permission notice shall be included in all
    copies or substantial portions of the Software.

    THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
    IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
    FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
    AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
    LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
    OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
    SOFTWARE.
"""

import itertools
from collections import OrderedDict

import numpy as np
import pytest

from PKTaskMerge.classes.ConflictAware import (
    FILL_TENSOR,
    CaOrder,
    ca_multi,
    ca_sequential,
    ca_tensor,
    make_mask_with_target_overlap,
)
from PKTaskMerge.classes.Exceptions import PreconditionError
from PKTaskMerge.classes.Pruning import PruneSpec
from PKTaskMerge.classes.TaskVector import SparsityMask, TaskVector, apply_mask


def random_vectors(count, shape=(8, 64), seed=0):
    rng = np.random.default_rng(seed)
    return [
        TaskVector(OrderedDict(w=rng.standard_normal(shape).astype(np.float32), b=rng.standard_normal(shape[-1]).astype(np.float32)), name=f"t{i}")
        for i in range(count)
    ]


def nm(n, m):
    return PruneSpec("balanced_nm", n=n, m=m)


def test_toy_block():
    a = np.array([9.0, 8.0, 1.0, 1.0], dtype=np.float32)
    b = np.array([7.0, 6.0, 5.0, 4.0], dtype=np.float32)
    bitsA, bitsB = ca_tensor([a, b], nm(2, 4))
    np.testing.assert_array_equal(bitsA, [True, True, False, False])
    np.testing.assert_array_equal(bitsB, [False, False, True, True])


def test_quarter_keep_masks_are_disjoint():
    masks = ca_sequential(random_vectors(2), nm(1, 4))
    assert masks[0].intersection(masks[1]).popcount() == 0


def test_three_quarter_keep_has_minimal_block_overlap():
    vectors = random_vectors(2, shape=(4, 32))
    masks = ca_sequential(vectors, nm(3, 4))
    shared = (masks[0]["w"] & masks[1]["w"]).reshape(4, 8, 4).sum(axis=-1)
    assert (shared == 2).all()


@pytest.mark.parametrize("m", [4, 8])
def test_block_overlap_matches_brute_force_minimum(m):
    rng = np.random.default_rng(m)
    for n in range(1, m + 1):
        a, b = rng.standard_normal((2, m)).astype(np.float32)
        bitsA, bitsB = ca_tensor([a, b], nm(n, m))
        keptA = set(np.flatnonzero(bitsA))
        bruteForce = min(len(keptA & set(choice)) for choice in itertools.combinations(range(m), n))
        assert int((bitsA & bitsB).sum()) == bruteForce == max(0, 2 * n - m)
        assert bitsB.sum() == n


def test_later_vector_keeps_block_law():
    masks = ca_sequential(random_vectors(3, shape=(6, 48), seed=2), nm(2, 8))
    for mask in masks:
        assert (mask["w"].reshape(6, 6, 8).sum(axis=-1) == 2).all()


@pytest.mark.parametrize("k", [2, 3, 4])
def test_one_over_k_keep_is_pairwise_disjoint(k):
    vectors = random_vectors(k, shape=(4, 12 * k), seed=k)
    masks = ca_multi(vectors, nm(1, k))
    for i, j in itertools.combinations(range(k), 2):
        assert masks[i].intersection(masks[j]).popcount() == 0


def test_four_vectors_at_ten_percent_keep_are_disjoint():
    vectors = random_vectors(4, shape=(16, 100), seed=9)
    masks = ca_multi(vectors, PruneSpec("magnitude_layer", keepFraction=0.1))
    for i, j in itertools.combinations(range(4), 2):
        assert masks[i].intersection(masks[j]).popcount() == 0
    assert all(m.popcount("w") == 160 for m in masks)


def test_row_quota_variant_is_disjoint():
    masks = ca_sequential(random_vectors(2, seed=4), PruneSpec("magnitude_row", keepFraction=0.25))
    assert masks[0].intersection(masks[1]).popcount() == 0
    assert (masks[1]["w"].sum(axis=-1) == 16).all()


def test_masked_vectors_are_orthogonal():
    vectors = random_vectors(2, seed=6)
    masks = ca_sequential(vectors, nm(16, 64))
    a, b = (apply_mask(v, mk) for v, mk in zip(vectors, masks))
    for name in ("w", "b"):
        assert float(np.dot(a[name].reshape(-1), b[name].reshape(-1))) == 0.0


def test_every_order_satisfies_the_bound():
    vectors = random_vectors(3, shape=(4, 24), seed=8)
    results = []
    for order in itertools.permutations([v.name for v in vectors]):
        masks = ca_multi(vectors, nm(1, 3), CaOrder(list(order)))
        for i, j in itertools.combinations(range(3), 2):
            assert masks[i].intersection(masks[j]).popcount() == 0
        results.append(masks[0]["w"])
    assert any(not np.array_equal(results[0], r) for r in results[1:])


def test_ca_multi_returns_masks_in_input_order():
    vectors = random_vectors(2, seed=3)
    forward = ca_multi(vectors, nm(1, 2), CaOrder(["t1", "t0"]))
    direct = ca_sequential([vectors[1], vectors[0]], nm(1, 2))
    np.testing.assert_array_equal(forward[0]["w"], direct[1]["w"])
    np.testing.assert_array_equal(forward[1]["w"], direct[0]["w"])


def test_order_must_be_a_permutation():
    with pytest.raises(PreconditionError):
        ca_multi(random_vectors(2), nm(1, 4), CaOrder(["t0", "t0"]))
    with pytest.raises(PreconditionError):
        ca_multi(random_vectors(2), nm(1, 4), CaOrder(["t0", "other"]))


def test_single_vector_and_unsupported_quota_rejected():
    with pytest.raises(PreconditionError):
        ca_sequential(random_vectors(1), nm(1, 4))
    with pytest.raises(PreconditionError):
        ca_sequential(random_vectors(2), PruneSpec("random", keepFraction=0.5, seed=1))


def test_tensor_fill_mode_keeps_tensor_quota():
    vectors = random_vectors(2, shape=(4, 16), seed=12)
    masks = ca_sequential(vectors, nm(3, 4), fillMode=FILL_TENSOR)
    assert masks[1].popcount("w") == 4 * 4 * 3
    free = ~masks[0]["w"]
    # every free position is used before any shared one
    assert (masks[1]["w"] | ~free).all()


def test_target_overlap():
    maskA = np.zeros(100, dtype=bool)
    maskA[:50] = True
    maskB = make_mask_with_target_overlap(maskA, 0.5, 0.5, seed=1)
    assert maskB.sum() == 50
    assert (maskA & maskB).sum() == 25
    assert (maskA & make_mask_with_target_overlap(maskA, 0.5, 0.0, seed=1)).sum() == 0
    full = make_mask_with_target_overlap(maskA, 0.5, 1.0, seed=1)
    assert (full & ~maskA).sum() == 0


def test_target_overlap_is_monotone():
    maskA = SparsityMask({"w": np.random.default_rng(0).random((32, 32)) < 0.3})
    keptA = maskA.popcount()
    previous = -1
    for target in np.linspace(0, 1, 11):
        maskB = make_mask_with_target_overlap(maskA, 0.3, float(target), seed=5)
        rate = maskA.intersection(maskB).popcount() / keptA
        assert abs(rate - target) <= 1 / keptA
        assert rate >= previous
        previous = rate


def test_target_overlap_infeasible():
    maskA = np.zeros(10, dtype=bool)
    maskA[:9] = True
    with pytest.raises(PreconditionError):
        make_mask_with_target_overlap(maskA, 0.5, 0.0, seed=0)
