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
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from PKTaskMerge.classes.Exceptions import AlignmentError, PreconditionError
from PKTaskMerge.classes.SafeTensors import (
    Checkpoint,
    TypedTensor,
    open_checkpoint,
    save_tensors,
)
from PKTaskMerge.classes.log import default_logger, tracelog


class TaskVector:
    """Per-tensor F32 deltas of one fine-tuned model against the shared base"""

    def __init__(self, entries=None, name="tv", fineTuned=None, base=None):
        self.entries: Dict[str, np.ndarray] = OrderedDict(entries or {})
        self.name = name
        self.fineTuned = fineTuned
        self.base = base

    def __repr__(self):
        return f"TaskVector({self.name!r}, tensors={len(self.entries)})"

    def __getitem__(self, tensorName) -> np.ndarray:
        return self.entries[tensorName]

    def __contains__(self, tensorName):
        return tensorName in self.entries

    def __len__(self):
        return len(self.entries)

    def names(self) -> List[str]:
        return list(self.entries.keys())

    def items(self):
        return self.entries.items()

    def numel(self) -> int:
        return int(sum(v.size for v in self.entries.values()))

    def withEntries(self, entries) -> "TaskVector":
        return TaskVector(entries, name=self.name, fineTuned=self.fineTuned, base=self.base)

    @staticmethod
    def fromCheckpoint(ckpt: Checkpoint, name=None) -> "TaskVector":
        """Loads a delta checkpoint written by save_task_vector"""
        entries = OrderedDict((n, ckpt.read_f32(n)) for n in ckpt.floatingNames())
        metadata = ckpt.metadata or {}
        return TaskVector(
            entries,
            name=name or metadata.get("task_vector", ckpt.name),
            fineTuned=metadata.get("fine_tuned"),
            base=metadata.get("base"),
        )


@dataclass
class SparsityMask:
    """Per-tensor boolean masks, row-major like the tensors they select from"""

    entries: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    keepFraction: Optional[float] = None

    def __getitem__(self, tensorName) -> np.ndarray:
        return self.entries[tensorName]

    def __contains__(self, tensorName):
        return tensorName in self.entries

    def names(self) -> List[str]:
        return list(self.entries.keys())

    def popcount(self, tensorName=None) -> int:
        if tensorName is not None:
            return int(np.count_nonzero(self.entries[tensorName]))
        return int(sum(np.count_nonzero(m) for m in self.entries.values()))

    def numel(self, tensorName=None) -> int:
        if tensorName is not None:
            return int(self.entries[tensorName].size)
        return int(sum(m.size for m in self.entries.values()))

    def realizedKeepFraction(self, tensorName=None) -> float:
        total = self.numel(tensorName)
        return self.popcount(tensorName) / total if total else 0.0

    def _combine(self, other: "SparsityMask", op) -> "SparsityMask":
        entries = OrderedDict()
        for tensorName, bits in self.entries.items():
            if tensorName not in other.entries:
                raise AlignmentError("missing from the other mask", tensorName)
            if other.entries[tensorName].shape != bits.shape:
                raise AlignmentError("mask shapes differ", tensorName)
            entries[tensorName] = op(bits, other.entries[tensorName])
        return SparsityMask(entries)

    def union(self, other: "SparsityMask") -> "SparsityMask":
        return self._combine(other, np.logical_or)

    def intersection(self, other: "SparsityMask") -> "SparsityMask":
        return self._combine(other, np.logical_and)

    @staticmethod
    def full(vector: TaskVector) -> "SparsityMask":
        return SparsityMask(
            OrderedDict((n, np.ones(v.shape, dtype=bool)) for n, v in vector.items()), keepFraction=1.0
        )

    @staticmethod
    def nonzero(vector: TaskVector) -> "SparsityMask":
        return SparsityMask(OrderedDict((n, v != 0) for n, v in vector.items()))


@dataclass
class ScalingCoefficients:
    """Per-vector λ values, or one unified λ shared by every vector"""

    perVector: Optional[List[float]] = None
    unified: Optional[float] = None

    def __post_init__(self):
        if (self.perVector is None) == (self.unified is None):
            raise PreconditionError("Give either per-vector coefficients or one unified coefficient")
        values = [self.unified] if self.unified is not None else list(self.perVector)
        for value in values:
            if not np.isfinite(value) or value <= 0:
                raise PreconditionError(f"Scaling coefficient must be a positive number, got {value}")

    def forCount(self, count: int) -> List[float]:
        if self.unified is not None:
            return [float(self.unified)] * count
        if len(self.perVector) != count:
            raise PreconditionError(
                f"{len(self.perVector)} coefficients given for {count} task vectors"
            )
        return [float(v) for v in self.perVector]


# ---------------------------------------------------------------- kernels


def deltaTensor(fineTuned: np.ndarray, base: np.ndarray, tensorName=None) -> np.ndarray:
    if fineTuned.shape != base.shape:
        raise AlignmentError(
            f"fine-tuned shape {list(fineTuned.shape)} differs from base {list(base.shape)}", tensorName
        )
    return np.subtract(fineTuned, base, dtype=np.float32)


def maskTensor(values: np.ndarray, mask: np.ndarray, tensorName=None) -> np.ndarray:
    if mask.shape != values.shape:
        raise AlignmentError(f"mask shape {list(mask.shape)} differs from {list(values.shape)}", tensorName)
    return np.where(mask, values, np.float32(0.0)).astype(np.float32, copy=False)


def rescaleFactor(keepFraction: float) -> np.float32:
    if not 0 < keepFraction <= 1:
        raise PreconditionError(f"keep fraction must be in (0, 1], got {keepFraction}")
    return np.float32(1.0 / keepFraction)


def mergeTensor(base: np.ndarray, contributions, tensorName=None) -> np.ndarray:
    """base + λ_1·(mask_1 ⊙ τ_1) + λ_2·(mask_2 ⊙ τ_2) + ... in F32, left to right.
    contributions is a sequence of (τ, mask or None, λ). Positions outside a
    mask are left untouched rather than added to."""
    acc = np.array(base, dtype=np.float32, copy=True)
    for tau, mask, lam in contributions:
        if tau.shape != acc.shape:
            raise AlignmentError(f"task vector shape {list(tau.shape)} differs from base {list(acc.shape)}", tensorName)
        term = np.multiply(tau, np.float32(lam), dtype=np.float32)
        if mask is None:
            np.add(acc, term, out=acc)
        else:
            if mask.shape != acc.shape:
                raise AlignmentError(f"mask shape {list(mask.shape)} differs from base {list(acc.shape)}", tensorName)
            np.add(acc, term, out=acc, where=mask)
    return acc


# ---------------------------------------------------------------- whole-vector ops


def check_alignment(fineTuned: Checkpoint, base: Checkpoint):
    baseFloating = {m.name: m for m in base.metas if m.isFloating}
    ftFloating = {m.name: m for m in fineTuned.metas if m.isFloating}
    for tensorName, meta in baseFloating.items():
        if tensorName not in fineTuned:
            raise AlignmentError(f"missing from {fineTuned.name}", tensorName)
        other = fineTuned.meta(tensorName)
        if not other.isFloating or other.dtype != meta.dtype:
            raise AlignmentError(f"dtype {other.dtype} differs from base dtype {meta.dtype}", tensorName)
        if other.shape != meta.shape:
            raise AlignmentError(f"shape {list(other.shape)} differs from base {list(meta.shape)}", tensorName)
    for tensorName in ftFloating:
        if tensorName not in baseFloating:
            raise AlignmentError(f"present in {fineTuned.name} but not a floating tensor of {base.name}", tensorName)


@tracelog
def delta(fine_tuned: Checkpoint, base: Checkpoint, name=None) -> TaskVector:
    check_alignment(fine_tuned, base)
    entries = OrderedDict()
    for tensorName in base.floatingNames():
        entries[tensorName] = deltaTensor(
            fine_tuned.read_f32(tensorName), base.read_f32(tensorName), tensorName
        )
    return TaskVector(entries, name=name or fine_tuned.name, fineTuned=fine_tuned.name, base=base.name)


def apply_mask(tau: TaskVector, mask: SparsityMask) -> TaskVector:
    entries = OrderedDict()
    for tensorName, values in tau.items():
        if tensorName not in mask:
            raise AlignmentError("no mask bits for tensor", tensorName)
        entries[tensorName] = maskTensor(values, mask[tensorName], tensorName)
    return tau.withEntries(entries)


def rescale(tau: TaskVector, keep_fraction: float) -> TaskVector:
    factor = rescaleFactor(keep_fraction)
    if factor == 1:
        return tau.withEntries(OrderedDict((n, v.copy()) for n, v in tau.items()))
    return tau.withEntries(
        OrderedDict((n, np.multiply(v, factor, dtype=np.float32)) for n, v in tau.items())
    )


@tracelog
def merge(base: Checkpoint, vectors: Sequence[Tuple[TaskVector, Optional[SparsityMask], float]]) -> Checkpoint:
    """In-memory W_final. Non-floating tensors are copied from base."""
    vectors = list(vectors)
    if len(vectors) == 0:
        raise PreconditionError("merge needs at least one task vector")
    floating = set(base.floatingNames())
    for tau, mask, lam in vectors:
        ScalingCoefficients(unified=lam)
        for tensorName in floating:
            if tensorName not in tau:
                raise AlignmentError(f"missing from task vector {tau.name}", tensorName)
            if mask is not None and tensorName not in mask:
                raise AlignmentError(f"missing from the mask of {tau.name}", tensorName)
        for tensorName in tau.names():
            if tensorName not in floating:
                raise AlignmentError(f"task vector {tau.name} has a tensor the base lacks", tensorName)
    out = []
    for meta in base.metas:
        if not meta.isFloating:
            out.append((meta.name, meta.dtype, meta.shape, base.read_raw(meta.name)))
            continue
        merged = mergeTensor(
            base.read_f32(meta.name),
            [(tau[meta.name], None if mask is None else mask[meta.name], lam) for tau, mask, lam in vectors],
            meta.name,
        )
        out.append(TypedTensor(meta.name, meta.dtype, merged))
    default_logger().debug(f"Merged {len(vectors)} task vectors into {len(out)} tensors")
    return Checkpoint.fromTensors(out, metadata=base.metadata, name="merged")


# ---------------------------------------------------------------- persistence


def save_task_vector(tau: TaskVector, path) -> str:
    metadata = {"task_vector": str(tau.name)}
    if tau.fineTuned is not None:
        metadata["fine_tuned"] = str(tau.fineTuned)
    if tau.base is not None:
        metadata["base"] = str(tau.base)
    return save_tensors(path, tau.entries, dtype="F32", metadata=metadata)


def save_masks(mask: SparsityMask, path, name=None) -> str:
    metadata = {}
    if mask.keepFraction is not None:
        metadata["keep_fraction"] = repr(float(mask.keepFraction))
    if name is not None:
        metadata["task_vector"] = str(name)
    return save_tensors(path, mask.entries, dtype="BOOL", metadata=metadata or None)


def load_masks(path) -> SparsityMask:
    """Reads a mask file (BOOL/U8 tensors). Floating tensors in an ordinary
    checkpoint are accepted too, their non-zero entries forming the mask."""
    ckpt = open_checkpoint(path)
    entries = OrderedDict()
    for meta in ckpt.metas:
        if meta.dtype in ("BOOL", "U8"):
            entries[meta.name] = ckpt.read_mask(meta.name)
        elif meta.isFloating:
            entries[meta.name] = ckpt.read_f32(meta.name) != 0
    keep = (ckpt.metadata or {}).get("keep_fraction")
    return SparsityMask(entries, keepFraction=float(keep) if keep is not None else None)
