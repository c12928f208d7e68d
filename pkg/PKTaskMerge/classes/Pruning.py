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
import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from PKTaskMerge.classes.Exceptions import AlignmentError, PreconditionError
from PKTaskMerge.classes.TaskVector import SparsityMask, TaskVector, maskTensor

UINT64_MASK = (1 << 64) - 1


class PruneMethod(str, Enum):
    MagnitudeLayer = "magnitude_layer"
    MagnitudeRow = "magnitude_row"
    Random = "random"
    BalancedNM = "balanced_nm"
    TiesTrim = "ties_trim"


@dataclass
class PruneSpec:
    method: PruneMethod
    keepFraction: Optional[float] = None
    n: Optional[int] = None
    m: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        self.method = PruneMethod(self.method)
        self.validate()

    @property
    def keep(self) -> float:
        if self.method == PruneMethod.BalancedNM:
            return self.n / self.m
        return self.keepFraction

    @property
    def sparsity(self) -> float:
        return 1.0 - self.keep

    def validate(self):
        if self.method == PruneMethod.BalancedNM:
            check_nm(self.n, self.m)
        else:
            check_keep(self.keepFraction)
        if self.method == PruneMethod.Random and self.seed is None:
            raise PreconditionError("random pruning needs a seed")

    def maskFor(self, values: np.ndarray, tensorName: str) -> np.ndarray:
        """Mask bits for one tensor of a single vector (TIES is a joint method)"""
        if self.method == PruneMethod.MagnitudeLayer:
            return prune_magnitude_layer(values, self.keepFraction)
        if self.method == PruneMethod.MagnitudeRow:
            return prune_magnitude_row(values, self.keepFraction)
        if self.method == PruneMethod.Random:
            return prune_random(values, self.keepFraction, self.seed, tensorName)
        if self.method == PruneMethod.BalancedNM:
            return prune_balanced_nm(values, self.n, self.m)
        raise PreconditionError(f"{self.method.value} masks are computed jointly across vectors")


def check_keep(keepFraction):
    if keepFraction is None or not (0 < float(keepFraction) <= 1):
        raise PreconditionError(f"keep fraction must be in (0, 1], got {keepFraction}")


def check_nm(n, m):
    if n is None or m is None:
        raise PreconditionError("n:m pruning needs both n and m")
    if int(n) != n or int(m) != m or n < 1 or m < 1:
        raise PreconditionError(f"n and m must be positive integers, got {n}:{m}")
    if n > m:
        raise PreconditionError(f"n must not exceed m, got {n}:{m}")


def keep_count(keepFraction: float, total: int) -> int:
    """ceil(keep × total), ignoring float noise below 1e-9 (0.7 × 10 keeps 7)"""
    if total == 0:
        return 0
    return min(total, max(1, math.ceil(round(keepFraction * total, 9))))


def tail_quota(length: int, n: int, m: int) -> int:
    # round-half-even of length·n/m
    return int(round(Fraction(length * n, m)))


def as_rows(values: np.ndarray) -> np.ndarray:
    """2-D row view along the last axis. 1-D tensors are a single row."""
    values = np.asarray(values)
    if values.ndim == 0:
        return values.reshape(1, 1)
    if values.ndim == 1:
        return values.reshape(1, -1)
    return values.reshape(-1, values.shape[-1])


def _nonEmpty(values: np.ndarray, what="tensor"):
    if np.size(values) == 0:
        raise PreconditionError(f"cannot prune an empty {what}")


def select_top(magnitudes: np.ndarray, quota, excluded: Optional[np.ndarray] = None) -> np.ndarray:
    """Per row of `magnitudes` (G x S), marks the `quota` highest entries.
    Ties go to the lower index. Positions flagged in `excluded` are only taken
    once every non-excluded position of the row is taken. quota is an int or
    one int per row."""
    groups, size = magnitudes.shape
    if size == 0:
        return np.zeros((groups, size), dtype=bool)
    negative = -np.asarray(magnitudes)
    if excluded is None:
        order = np.argsort(negative, axis=-1, kind="stable")
    else:
        order = np.lexsort((negative, excluded), axis=-1)
    if np.ndim(quota) == 0:
        mask = np.zeros((groups, size), dtype=bool)
        np.put_along_axis(mask, order[:, : int(quota)], True, axis=-1)
        return mask
    quota = np.asarray(quota, dtype=np.int64)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(size), (groups, size)), axis=-1)
    return ranks < quota[:, None]


def select_blocks(magnitudes: np.ndarray, n: int, m: int, excluded: Optional[np.ndarray] = None) -> np.ndarray:
    """n:m selection over rows (R x L): n per full block of m, tail blocks by tail_quota"""
    rows, length = magnitudes.shape
    full = length // m
    tail = length - full * m
    mask = np.zeros((rows, length), dtype=bool)
    if full:
        head = slice(0, full * m)
        blocks = magnitudes[:, head].reshape(rows * full, m)
        blockExcluded = None if excluded is None else excluded[:, head].reshape(rows * full, m)
        mask[:, head] = select_top(blocks, n, blockExcluded).reshape(rows, full * m)
    if tail:
        rest = slice(full * m, length)
        mask[:, rest] = select_top(
            magnitudes[:, rest], tail_quota(tail, n, m), None if excluded is None else excluded[:, rest]
        )
    return mask


def block_quota_total(shape, n: int, m: int) -> int:
    rows = as_rows(np.empty(shape, dtype=np.uint8))
    count, length = rows.shape
    full = length // m
    return count * (full * n + tail_quota(length - full * m, n, m))


# ---------------------------------------------------------------- operations


def prune_magnitude_layer(values: np.ndarray, keep_fraction: float) -> np.ndarray:
    check_keep(keep_fraction)
    _nonEmpty(values)
    values = np.asarray(values)
    flat = np.abs(values).reshape(1, -1)
    return select_top(flat, keep_count(keep_fraction, flat.size)).reshape(values.shape)


def prune_magnitude_row(values: np.ndarray, keep_fraction: float) -> np.ndarray:
    check_keep(keep_fraction)
    _nonEmpty(values)
    values = np.asarray(values)
    rows = np.abs(as_rows(values))
    _nonEmpty(rows[0], "row")
    return select_top(rows, keep_count(keep_fraction, rows.shape[1])).reshape(values.shape)


def name_hash(tensorName: str) -> int:
    return int.from_bytes(hashlib.blake2b(tensorName.encode("utf-8"), digest_size=8).digest(), "little")


def vector_seed(seed: int, vectorName: str) -> int:
    """Derives a per-vector seed so vectors sharing tensor names get distinct masks"""
    digest = hashlib.blake2b(f"{int(seed) & UINT64_MASK}:{vectorName}".encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def random_generator(seed: int, tensorName: str) -> np.random.Generator:
    """Philox keyed by (seed, hash(tensor name)); element i consumes counter
    position i, so a mask never depends on what else was drawn before it."""
    key = np.array([int(seed) & UINT64_MASK, name_hash(tensorName)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def prune_random(values, keep_fraction: float, seed: int, tensor_name: str) -> np.ndarray:
    check_keep(keep_fraction)
    shape = np.shape(values)
    size = int(np.prod(shape, dtype=np.int64))
    if keep_fraction == 1:
        return np.ones(shape, dtype=bool)
    draws = random_generator(seed, tensor_name).random(size)
    return (draws < keep_fraction).reshape(shape)


def prune_balanced_nm(values: np.ndarray, n: int, m: int) -> np.ndarray:
    check_nm(n, m)
    _nonEmpty(values)
    values = np.asarray(values)
    return select_blocks(np.abs(as_rows(values)), int(n), int(m)).reshape(values.shape)


def elect_signs(retained: Sequence[np.ndarray]) -> np.ndarray:
    """Sign of the sum of retained values per element. Where that sum is
    exactly zero the tensor's majority sign is used (positive on a tie)."""
    total = np.zeros(retained[0].shape, dtype=np.float32)
    for values in retained:
        total = total + values
    signs = np.sign(total)
    majority = np.sign(signs.sum())
    if majority == 0:
        majority = 1.0
    signs[signs == 0] = majority
    return signs.astype(np.float32)


def ties_elect(values: Sequence[np.ndarray], trimmed: Sequence[np.ndarray], tensorName=None) -> List[np.ndarray]:
    """Clears trimmed bits whose value disagrees with the elected sign.
    Zero values never disagree."""
    retained = [maskTensor(v, bits, tensorName) for v, bits in zip(values, trimmed)]
    elected = elect_signs(retained)
    return [bits & (np.sign(v) * elected >= 0) for v, bits in zip(values, trimmed)]


def ties_tensor(values: Sequence[np.ndarray], keep_fraction: float, tensorName=None) -> List[np.ndarray]:
    """Magnitude trim of each vector's tensor followed by sign election"""
    shape = values[0].shape
    for v in values[1:]:
        if v.shape != shape:
            raise AlignmentError(f"shape {list(v.shape)} differs from {list(shape)}", tensorName)
    trimmed = [prune_magnitude_layer(v, keep_fraction) for v in values]
    return ties_elect(values, trimmed, tensorName)


def ties_trim_and_elect(vectors: Sequence[TaskVector], keep_fraction: float) -> Tuple[List[SparsityMask], List[TaskVector]]:
    if len(vectors) < 2:
        raise PreconditionError("TIES sign election needs at least two task vectors")
    check_keep(keep_fraction)
    names = vectors[0].names()
    for tau in vectors[1:]:
        if set(tau.names()) != set(names):
            missing = sorted(set(names).symmetric_difference(tau.names()))
            raise AlignmentError(f"task vector {tau.name} does not align", missing[0])
    masks = [SparsityMask(keepFraction=keep_fraction) for _ in vectors]
    corrected = [dict() for _ in vectors]
    for tensorName in names:
        bits = ties_tensor([tau[tensorName] for tau in vectors], keep_fraction, tensorName)
        for i, tau in enumerate(vectors):
            masks[i].entries[tensorName] = bits[i]
            corrected[i][tensorName] = maskTensor(tau[tensorName], bits[i], tensorName)
    return masks, [tau.withEntries(c) for tau, c in zip(vectors, corrected)]
