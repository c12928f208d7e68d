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

import struct
from collections import OrderedDict

import numpy as np
import pytest

from PKTaskMerge.classes.Exceptions import AlignmentError, PreconditionError
from PKTaskMerge.classes.SafeTensors import Checkpoint, TypedTensor, open_checkpoint
from PKTaskMerge.classes.TaskVector import (
    ScalingCoefficients,
    SparsityMask,
    TaskVector,
    apply_mask,
    delta,
    load_masks,
    merge,
    mergeTensor,
    rescale,
    save_masks,
    save_task_vector,
)


def checkpoint(name="ckpt", **arrays):
    tensors = [TypedTensor(n.replace("__", "."), "F32", np.asarray(v, dtype=np.float32)) for n, v in arrays.items()]
    return Checkpoint.fromTensors(tensors, name=name)


def vector(name="tv", **arrays):
    return TaskVector(
        OrderedDict((n, np.asarray(v, dtype=np.float32)) for n, v in arrays.items()), name=name
    )


def test_delta_of_identical_models_is_zero():
    base = checkpoint(w=[[1, 2], [3, 4]], b=[0.5])
    tau = delta(base, base)
    assert all(not v.any() for _, v in tau.items())


def test_delta_by_hand():
    tau = delta(checkpoint(w=[1.5, 1.0]), checkpoint(w=[1, 2]), name="A")
    np.testing.assert_array_equal(tau["w"], [0.5, -1.0])
    assert tau.name == "A"


def test_delta_missing_tensor():
    base = checkpoint(w=[1.0], lm_head__weight=[2.0])
    with pytest.raises(AlignmentError, match="lm_head.weight"):
        delta(checkpoint(w=[1.0]), base)


def test_delta_shape_mismatch():
    with pytest.raises(AlignmentError):
        delta(checkpoint(w=[1.0, 2.0]), checkpoint(w=[1.0]))


def test_delta_skips_integer_tensors():
    base = Checkpoint.fromTensors(
        [TypedTensor("w", "F32", np.zeros(2, dtype=np.float32)), ("ids", "I64", (1,), struct.pack("<q", 7))]
    )
    tuned = Checkpoint.fromTensors(
        [TypedTensor("w", "F32", np.ones(2, dtype=np.float32)), ("ids", "I64", (1,), struct.pack("<q", 9))]
    )
    assert delta(tuned, base).names() == ["w"]


def test_apply_mask():
    tau = vector(w=[0.5, -1.0, 2.0])
    masked = apply_mask(tau, SparsityMask({"w": np.array([True, False, True])}))
    np.testing.assert_array_equal(masked["w"], [0.5, 0.0, 2.0])
    np.testing.assert_array_equal(apply_mask(tau, SparsityMask.full(tau))["w"], tau["w"])
    assert not apply_mask(tau, SparsityMask({"w": np.zeros(3, dtype=bool)}))["w"].any()


def test_apply_mask_is_idempotent():
    rng = np.random.default_rng(1)
    tau = vector(w=rng.standard_normal((8, 8)))
    mask = SparsityMask({"w": rng.random((8, 8)) < 0.3})
    once = apply_mask(tau, mask)
    np.testing.assert_array_equal(apply_mask(once, mask)["w"], once["w"])


@pytest.mark.parametrize("keep, value, expected", [(1.0, 0.2, 0.2), (0.1, 0.2, 2.0), (0.25, -1.0, -4.0)])
def test_rescale(keep, value, expected):
    out = rescale(vector(w=[value]), keep)
    assert out["w"][0] == pytest.approx(expected, rel=1e-6)


@pytest.mark.parametrize("keep", [0.0, -0.5, 1.5])
def test_rescale_rejects_keep_outside_unit_interval(keep):
    with pytest.raises(PreconditionError):
        rescale(vector(w=[1.0]), keep)


def test_merge_of_zero_vector_is_base():
    base = checkpoint(w=[1.0, -2.0])
    merged = merge(base, [(vector(w=[0.0, 0.0]), None, 5.0)])
    assert merged.read_raw("w") == base.read_raw("w")


def test_merge_by_hand():
    base = checkpoint(w=[0.0, 0.0])
    merged = merge(base, [(vector(w=[1.0, 2.0]), SparsityMask({"w": np.ones(2, dtype=bool)}), 0.5)])
    np.testing.assert_array_equal(merged.read_f32("w"), [0.5, 1.0])


def test_merge_disjoint_masks_is_union_of_masked_entries():
    base = checkpoint(w=[0.0, 0.0, 0.0, 0.0])
    tauA, tauB = vector("A", w=[1, 2, 3, 4]), vector("B", w=[10, 20, 30, 40])
    maskA = SparsityMask({"w": np.array([True, False, True, False])})
    maskB = SparsityMask({"w": np.array([False, True, False, True])})
    merged = merge(base, [(tauA, maskA, 1.0), (tauB, maskB, 1.0)])
    np.testing.assert_array_equal(merged.read_f32("w"), [1, 20, 3, 40])


@pytest.mark.parametrize("count", [1, 2, 3])
def test_merge_is_exact_in_f32(count):
    rng = np.random.default_rng(count)
    shape = (16, 12)
    baseValues = rng.standard_normal(shape).astype(np.float32)
    base = checkpoint(w=baseValues)
    contributions = []
    expected = baseValues.copy()
    for i in range(count):
        tau = vector(f"t{i}", w=rng.standard_normal(shape))
        mask = SparsityMask({"w": rng.random(shape) < 0.5})
        lam = [0.3, 1.2, 0.7][i]
        contributions.append((tau, mask, lam))
        expected = np.where(mask["w"], expected + np.float32(lam) * tau["w"], expected).astype(np.float32)
    merged = merge(base, contributions).read_f32("w")
    assert merged.tobytes() == expected.tobytes()


def test_merge_linearity_in_lambda():
    base = checkpoint(w=[0.0, 0.0, 0.0])
    tau = vector(w=[0.5, -0.25, 2.0])
    mask = SparsityMask({"w": np.array([True, True, False])})
    once = merge(base, [(tau, mask, 1.0)]).read_f32("w")
    twice = merge(base, [(tau, mask, 2.0)]).read_f32("w")
    np.testing.assert_array_equal(twice - once, apply_mask(tau, mask)["w"])


def test_merge_copies_integer_tensors():
    base = Checkpoint.fromTensors(
        [TypedTensor("w", "BF16", np.array([1.0, 2.0], dtype=np.float32)), ("ids", "I64", (1,), struct.pack("<q", 3))]
    )
    merged = merge(base, [(vector(w=[1.0, 1.0]), None, 1.0)])
    assert merged.read_raw("ids") == struct.pack("<q", 3)
    assert merged.meta("w").dtype == "BF16"
    np.testing.assert_array_equal(merged.read_f32("w"), [2.0, 3.0])


def test_merge_rejects_empty_list_and_bad_lambda():
    base = checkpoint(w=[1.0])
    with pytest.raises(PreconditionError):
        merge(base, [])
    with pytest.raises(PreconditionError):
        merge(base, [(vector(w=[1.0]), None, 0.0)])


def test_merge_tensor_rejects_shape_mismatch():
    with pytest.raises(AlignmentError):
        mergeTensor(np.zeros(3, dtype=np.float32), [(np.zeros(2, dtype=np.float32), None, 1.0)], "w")


def test_disjoint_masks_norm_decomposition():
    rng = np.random.default_rng(7)
    values = rng.standard_normal((64, 64)).astype(np.float32)
    support = rng.random((64, 64)) < 0.5
    a = np.where(support, values, 0).astype(np.float32) * np.float32(0.8)
    b = np.where(~support, rng.standard_normal((64, 64)), 0).astype(np.float32) * np.float32(1.3)
    total = float(np.sum((a + b).astype(np.float64) ** 2))
    parts = float(np.sum(a.astype(np.float64) ** 2) + np.sum(b.astype(np.float64) ** 2))
    assert abs(total - parts) <= 1e-6 * total


def test_scaling_coefficients():
    assert ScalingCoefficients(unified=0.6).forCount(3) == [0.6, 0.6, 0.6]
    assert ScalingCoefficients(perVector=[1.0, 2.0]).forCount(2) == [1.0, 2.0]
    with pytest.raises(PreconditionError):
        ScalingCoefficients(perVector=[1.0]).forCount(2)
    with pytest.raises(PreconditionError):
        ScalingCoefficients(unified=float("nan"))
    with pytest.raises(PreconditionError):
        ScalingCoefficients()


def test_mask_algebra():
    a = SparsityMask({"w": np.array([True, True, False, False])})
    b = SparsityMask({"w": np.array([True, False, True, False])})
    assert a.union(b).popcount() == 3
    assert a.intersection(b).popcount() == 1
    assert a.realizedKeepFraction() == 0.5
    with pytest.raises(AlignmentError):
        a.union(SparsityMask({"v": np.ones(4, dtype=bool)}))


def test_task_vector_file_round_trip(tmp_path):
    tau = vector("math", w=[[0.5, -1.0]], b=[2.0])
    path = save_task_vector(tau, str(tmp_path / "math.safetensors"))
    loaded = TaskVector.fromCheckpoint(open_checkpoint(path))
    assert loaded.name == "math"
    np.testing.assert_array_equal(loaded["w"], tau["w"])


def test_mask_file_round_trip(tmp_path):
    mask = SparsityMask({"w": np.array([[True, False], [False, True]])}, keepFraction=0.5)
    path = save_masks(mask, str(tmp_path / "mask.safetensors"), name="A")
    loaded = load_masks(path)
    np.testing.assert_array_equal(loaded["w"], mask["w"])
    assert loaded.keepFraction == 0.5
    assert open_checkpoint(path).meta("w").dtype == "BOOL"


def test_load_masks_from_checkpoint_uses_non_zero_entries(tmp_path):
    path = save_task_vector(vector(w=[0.0, 1.5, 0.0, -2.0]), str(tmp_path / "tv.safetensors"))
    np.testing.assert_array_equal(load_masks(path)["w"], [False, True, False, True])
