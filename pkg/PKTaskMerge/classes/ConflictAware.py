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
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from PKTaskMerge.classes.Exceptions import AlignmentError, PreconditionError
from PKTaskMerge.classes.Pruning import (
    PruneMethod,
    PruneSpec,
    as_rows,
    block_quota_total,
    check_keep,
    keep_count,
    random_generator,
    select_blocks,
    select_top,
)
from PKTaskMerge.classes.TaskVector import SparsityMask, TaskVector
from PKTaskMerge.classes.log import default_logger

FILL_BLOCK = "block"
FILL_TENSOR = "tensor"
FILL_MODES = (FILL_BLOCK, FILL_TENSOR)
CA_METHODS = (PruneMethod.BalancedNM, PruneMethod.MagnitudeLayer, PruneMethod.MagnitudeRow)


@dataclass
class CaOrder:
    """The sequence in which task vectors are pruned; earlier vectors claim
    positions first."""

    names: List[str]

    def validateAgainst(self, vectorNames: Sequence[str]):
        if len(self.names) == 0:
            raise PreconditionError("pruning order is empty")
        if sorted(self.names) != sorted(vectorNames) or len(set(self.names)) != len(self.names):
            raise PreconditionError(
                f"pruning order {self.names} is not a permutation of {list(vectorNames)}"
            )

    def arrange(self, vectors: Sequence[TaskVector]) -> List[TaskVector]:
        self.validateAgainst([v.name for v in vectors])
        byName = {v.name: v for v in vectors}
        return [byName[name] for name in self.names]


def _checkCaSpec(prune: PruneSpec, fillMode: str):
    if prune.method not in CA_METHODS:
        raise PreconditionError(f"conflict-aware pruning does not support {prune.method.value} quotas")
    if fillMode not in FILL_MODES:
        raise PreconditionError(f"fill mode must be one of {FILL_MODES}, got {fillMode!r}")


def _fillAcrossTensor(magnitudes, excluded, selected, quotaTotal):
    """Keeps only the non-excluded picks of a block-wise selection, then tops
    the tensor up to quotaTotal from the excluded region by magnitude,
    ignoring block boundaries."""
    selected = selected & ~excluded
    shortfall = quotaTotal - int(np.count_nonzero(selected))
    if shortfall <= 0:
        return selected
    candidates = (excluded & ~selected).reshape(1, -1)
    scores = np.where(candidates, magnitudes.reshape(1, -1), np.float32(-1.0))
    extra = select_top(scores, shortfall, ~candidates)
    return selected | extra.reshape(selected.shape)


def ca_tensor(values: Sequence[np.ndarray], prune: PruneSpec, fillMode: str = FILL_BLOCK, tensorName=None) -> List[np.ndarray]:
    """Sequential exclusion for one tensor: each vector selects its quota from
    positions no earlier vector kept, falling back to already-kept positions
    (by magnitude) only when too few free positions remain."""
    _checkCaSpec(prune, fillMode)
    shape = np.shape(values[0])
    for v in values[1:]:
        if np.shape(v) != shape:
            raise AlignmentError(f"shape {list(np.shape(v))} differs from {list(shape)}", tensorName)
    taken = np.zeros(shape, dtype=bool)
    masks = []
    for v in values:
        if taken.size == 0:
            masks.append(np.zeros(shape, dtype=bool))
            continue
        magnitudes = np.abs(as_rows(v))
        excluded = as_rows(taken)
        if prune.method == PruneMethod.BalancedNM:
            selected = select_blocks(magnitudes, int(prune.n), int(prune.m), excluded)
            if fillMode == FILL_TENSOR:
                selected = _fillAcrossTensor(
                    magnitudes, excluded, selected, block_quota_total(shape, int(prune.n), int(prune.m))
                )
        elif prune.method == PruneMethod.MagnitudeLayer:
            selected = select_top(
                magnitudes.reshape(1, -1), keep_count(prune.keepFraction, taken.size), excluded.reshape(1, -1)
            )
        else:
            selected = select_top(magnitudes, keep_count(prune.keepFraction, magnitudes.shape[1]), excluded)
        mask = selected.reshape(shape)
        masks.append(mask)
        taken = taken | mask
    return masks


def ca_sequential(vectors: Sequence[TaskVector], prune: PruneSpec, fillMode: str = FILL_BLOCK) -> List[SparsityMask]:
    """Masks for `vectors` in the given (pruning) order"""
    if len(vectors) < 2:
        raise PreconditionError("conflict-aware pruning needs at least two task vectors")
    _checkCaSpec(prune, fillMode)
    names = vectors[0].names()
    for tau in vectors[1:]:
        for tensorName in names:
            if tensorName not in tau:
                raise AlignmentError(f"missing from task vector {tau.name}", tensorName)
    masks = [SparsityMask(OrderedDict(), keepFraction=prune.keep) for _ in vectors]
    for tensorName in names:
        bits = ca_tensor([tau[tensorName] for tau in vectors], prune, fillMode, tensorName)
        for mask, b in zip(masks, bits):
            mask.entries[tensorName] = b
    default_logger().debug(f"CA masks built for {len(vectors)} vectors over {len(names)} tensors")
    return masks


def ca_multi(vectors: Sequence[TaskVector], prune: PruneSpec, order: CaOrder = None, fillMode: str = FILL_BLOCK) -> List[SparsityMask]:
    """ca_sequential in `order` (default: as given). Masks come back aligned
    with `vectors`, not with the order."""
    if order is None:
        order = CaOrder([v.name for v in vectors])
    arranged = order.arrange(vectors)
    masks = ca_sequential(arranged, prune, fillMode)
    byName = {tau.name: mask for tau, mask in zip(arranged, masks)}
    return [byName[v.name] for v in vectors]


def target_overlap_tensor(bitsA: np.ndarray, keep_fraction: float, target_overlap_rate: float, seed: int, tensorName: str = "") -> np.ndarray:
    check_keep(keep_fraction)
    if not 0 <= target_overlap_rate <= 1:
        raise PreconditionError(f"target overlap rate must be in [0, 1], got {target_overlap_rate}")
    bitsA = np.asarray(bitsA, dtype=bool)
    total = bitsA.size
    keptA = int(np.count_nonzero(bitsA))
    keptB = keep_count(keep_fraction, total)
    shared = int(round(target_overlap_rate * keptA))
    if shared > keptA or shared > keptB or keptB - shared > total - keptA:
        raise PreconditionError(
            f"{tensorName}: overlap {target_overlap_rate} infeasible "
            f"(kept_A={keptA}, kept_B={keptB}, shared={shared}, size={total})"
        )
    gen = random_generator(seed, tensorName)
    flat = bitsA.reshape(-1)
    inside = gen.permutation(np.flatnonzero(flat))[:shared]
    outside = gen.permutation(np.flatnonzero(~flat))[: keptB - shared]
    bitsB = np.zeros(total, dtype=bool)
    bitsB[inside] = True
    bitsB[outside] = True
    return bitsB.reshape(bitsA.shape)


def make_mask_with_target_overlap(mask_A, keep_fraction: float, target_overlap_rate: float, seed: int):
    """Random mask B with keep_fraction of the positions, of which a share
    `target_overlap_rate` of A's kept count lies inside A's support.
    Accepts a SparsityMask (returns one) or a single boolean array."""
    if isinstance(mask_A, SparsityMask):
        entries = OrderedDict(
            (tensorName, target_overlap_tensor(bits, keep_fraction, target_overlap_rate, seed, tensorName))
            for tensorName, bits in mask_A.entries.items()
        )
        return SparsityMask(entries, keepFraction=keep_fraction)
    return target_overlap_tensor(mask_A, keep_fraction, target_overlap_rate, seed)
