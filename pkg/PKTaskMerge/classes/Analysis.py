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
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from PKTaskMerge.classes.Archiver import safe_open_w
from PKTaskMerge.classes.Exceptions import (
    AlignmentError,
    InvariantViolationError,
    PreconditionError,
)
from PKTaskMerge.classes.Pruning import (
    as_rows,
    check_keep,
    prune_magnitude_layer,
    prune_random,
    vector_seed,
)
from PKTaskMerge.classes.TaskVector import SparsityMask, TaskVector
from PKTaskMerge.classes.log import default_logger

DEFAULT_SPARSITIES = (0.5, 0.75, 0.9)


# ---------------------------------------------------------------- overlap


def overlap_counts(bitsA: np.ndarray, bitsB: np.ndarray, tensorName=None):
    """(shared, kept_A, kept_B) for two aligned bitsets"""
    if np.shape(bitsA) != np.shape(bitsB):
        raise AlignmentError(f"mask shapes {list(np.shape(bitsA))} and {list(np.shape(bitsB))} differ", tensorName)
    return (
        int(np.count_nonzero(np.logical_and(bitsA, bitsB))),
        int(np.count_nonzero(bitsA)),
        int(np.count_nonzero(bitsB)),
    )


def _rate(shared, keptA):
    return shared / keptA if keptA else None


@dataclass
class OverlapReport:
    """Overlap of B against A: shared / kept_A, aggregated over tensors by
    total counts rather than by averaging per-tensor rates."""

    rate: float
    shared: int
    keptA: int
    keptB: int
    perTensor: Dict[str, dict] = field(default_factory=OrderedDict)

    def toDict(self):
        return {
            "rate": self.rate,
            "shared": self.shared,
            "kept_a": self.keptA,
            "kept_b": self.keptB,
            "per_tensor": self.perTensor,
        }


def overlap_rate(mask_A, mask_B) -> OverlapReport:
    """Accepts two SparsityMasks or two boolean arrays"""
    if not isinstance(mask_A, SparsityMask):
        mask_A = SparsityMask(OrderedDict([("tensor", np.asarray(mask_A, dtype=bool))]))
        mask_B = SparsityMask(OrderedDict([("tensor", np.asarray(mask_B, dtype=bool))]))
    perTensor = OrderedDict()
    shared = keptA = keptB = 0
    for tensorName, bitsA in mask_A.entries.items():
        if tensorName not in mask_B:
            raise AlignmentError("missing from the second mask", tensorName)
        s, a, b = overlap_counts(bitsA, mask_B[tensorName], tensorName)
        perTensor[tensorName] = {"rate": _rate(s, a), "shared": s, "kept_a": a, "kept_b": b}
        shared, keptA, keptB = shared + s, keptA + a, keptB + b
    if keptA == 0:
        raise PreconditionError("overlap rate is undefined when the first mask keeps nothing")
    return OverlapReport(shared / keptA, shared, keptA, keptB, perTensor)


class OverlapAccumulator:
    """Streams per-tensor masks of k vectors into pairwise shared/kept totals"""

    def __init__(self, names: Sequence[str], keepPerTensor=True):
        self.names = list(names)
        self.kept = np.zeros(len(self.names), dtype=np.int64)
        self.total = np.zeros(len(self.names), dtype=np.int64)
        self.shared = np.zeros((len(self.names), len(self.names)), dtype=np.int64)
        self.keepPerTensor = keepPerTensor
        self.perTensor = OrderedDict()

    def add(self, tensorName, masks: Sequence[Optional[np.ndarray]], size: int):
        """masks[i] is None when vector i keeps the whole tensor"""
        full = np.ones(size, dtype=bool) if any(m is None for m in masks) else None
        flat = [full if m is None else np.asarray(m, dtype=bool).reshape(-1) for m in masks]
        counts = [int(np.count_nonzero(b)) for b in flat]
        rates = OrderedDict()
        for i in range(len(flat)):
            self.kept[i] += counts[i]
            self.total[i] += size
            self.shared[i, i] += counts[i]
            for j in range(i + 1, len(flat)):
                s = int(np.count_nonzero(flat[i] & flat[j]))
                self.shared[i, j] += s
                self.shared[j, i] += s
                rates[f"{self.names[i]}|{self.names[j]}"] = _rate(s, counts[i])
                rates[f"{self.names[j]}|{self.names[i]}"] = _rate(s, counts[j])
        if self.keepPerTensor:
            self.perTensor[tensorName] = {
                "keep": OrderedDict(
                    (n, (c / size) if size else None) for n, c in zip(self.names, counts)
                ),
                "overlap": rates,
            }

    def matrix(self) -> List[List[Optional[float]]]:
        """Row i, column j: shared(i, j) / kept_i"""
        return [
            [_rate(int(self.shared[i, j]), int(self.kept[i])) for j in range(len(self.names))]
            for i in range(len(self.names))
        ]

    def keepFractions(self) -> Dict[str, Optional[float]]:
        return OrderedDict(
            (n, (int(k) / int(t)) if t else None) for n, k, t in zip(self.names, self.kept, self.total)
        )

    def toDict(self):
        return {
            "names": self.names,
            "matrix": self.matrix(),
            "keep_fractions": self.keepFractions(),
        }


def pairwise_overlap_matrix(masks: Sequence[SparsityMask], names: Sequence[str]) -> List[List[Optional[float]]]:
    accumulator = OverlapAccumulator(names, keepPerTensor=False)
    for tensorName in masks[0].names():
        accumulator.add(tensorName, [m[tensorName] for m in masks], masks[0].numel(tensorName))
    return accumulator.matrix()


def expected_random_overlap(keep_fraction_B: float) -> float:
    """Expected overlap rate of A with an independent random mask B"""
    check_keep(keep_fraction_B)
    return float(keep_fraction_B)


# ---------------------------------------------------------------- balance


@dataclass
class BalanceReport:
    tensorName: str
    bandRows: int
    bandCols: int
    grid: np.ndarray
    areas: np.ndarray
    mean: float
    variance: float
    cv: float

    @property
    def popcount(self) -> int:
        return int(self.grid.sum())

    def toDataFrame(self) -> pd.DataFrame:
        return pd.DataFrame(self.grid)

    def toCsv(self, path) -> str:
        safe_open_w(path)
        self.toDataFrame().to_csv(path, header=False, index=False)
        return path

    def toDict(self):
        return {
            "tensor": self.tensorName,
            "band_rows": self.bandRows,
            "band_cols": self.bandCols,
            "grid": self.grid.tolist(),
            "popcount": self.popcount,
            "mean": self.mean,
            "variance": self.variance,
            "cv": self.cv,
        }


def balance_grid(mask: np.ndarray, band_rows: int, band_cols: int, tensorName: str = "tensor") -> BalanceReport:
    """Counts kept weights per (row band x column band) cell. Summary
    statistics are over cell densities, so partial edge cells compare
    fairly; the grid itself holds counts."""
    if band_rows < 1 or band_cols < 1:
        raise PreconditionError(f"band sizes must be >= 1, got {band_rows}x{band_cols}")
    rows = as_rows(np.asarray(mask, dtype=bool))
    height, width = rows.shape
    if band_rows > height or band_cols > width:
        raise PreconditionError(
            f"{tensorName}: band {band_rows}x{band_cols} is larger than the {height}x{width} tensor"
        )
    rowStarts = np.arange(0, height, band_rows)
    colStarts = np.arange(0, width, band_cols)
    counts = np.add.reduceat(np.add.reduceat(rows.astype(np.int64), rowStarts, axis=0), colStarts, axis=1)
    rowSizes = np.diff(np.append(rowStarts, height))
    colSizes = np.diff(np.append(colStarts, width))
    areas = np.outer(rowSizes, colSizes)
    densities = counts / areas
    mean = float(densities.mean())
    variance = float(densities.var())
    cv = math.sqrt(variance) / mean if mean > 0 else 0.0
    return BalanceReport(tensorName, band_rows, band_cols, counts, areas, mean, variance, cv)


def concentrated_fixture(shape=(64, 64), seed=0, scale=10.0) -> np.ndarray:
    """Gaussian tensor whose top-left quadrant is `scale` times larger"""
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(shape).astype(np.float32)
    values[: shape[0] // 2, : shape[1] // 2] *= np.float32(scale)
    return values


# ---------------------------------------------------------------- orthogonality


@dataclass
class OrthoReport:
    names: List[str]
    lambdas: List[float]
    innerProducts: Dict[str, float]
    disjoint: Dict[str, bool]
    norms: Dict[str, float]
    totalNorm: float
    residual: float

    @property
    def relativeResidual(self) -> float:
        return abs(self.residual) / self.totalNorm if self.totalNorm else abs(self.residual)

    def toDict(self):
        return {
            "names": self.names,
            "lambdas": self.lambdas,
            "inner_products": self.innerProducts,
            "disjoint": self.disjoint,
            "norms": self.norms,
            "total_norm": self.totalNorm,
            "residual": self.residual,
            "relative_residual": self.relativeResidual,
        }


def ortho_check(vectors: Sequence[TaskVector], lambdas: Sequence[float], masks: Optional[Sequence[SparsityMask]] = None) -> OrthoReport:
    """Frobenius inner products and the norm decomposition of Σ λ_i τ'_i for
    already-masked vectors τ'. Supports come from `masks` when given, else
    from the non-zero entries. Disjoint supports must give an inner product
    of exactly 0.0."""
    if len(vectors) < 2:
        raise PreconditionError("orthogonality check needs at least two vectors")
    if len(lambdas) != len(vectors):
        raise PreconditionError(f"{len(lambdas)} coefficients given for {len(vectors)} vectors")
    names = [v.name for v in vectors]
    tensorNames = vectors[0].names()
    for v in vectors[1:]:
        for tensorName in tensorNames:
            if tensorName not in v or v[tensorName].shape != vectors[0][tensorName].shape:
                raise AlignmentError(f"task vector {v.name} does not align", tensorName)
    supports = masks if masks is not None else [SparsityMask.nonzero(v) for v in vectors]
    pairs = list(combinations(range(len(vectors)), 2))
    inner = {p: 0.0 for p in pairs}
    shared = {p: 0 for p in pairs}
    norms = [0.0] * len(vectors)
    totalNorm = 0.0
    for tensorName in tensorNames:
        flat = [np.asarray(v[tensorName], dtype=np.float32).reshape(-1) for v in vectors]
        scaled = [np.multiply(f, np.float32(lam), dtype=np.float32) for f, lam in zip(flat, lambdas)]
        combined = np.zeros_like(flat[0])
        for s in scaled:
            combined = combined + s
        totalNorm += float(np.dot(combined.astype(np.float64), combined.astype(np.float64)))
        for i, s in enumerate(scaled):
            norms[i] += float(np.dot(s.astype(np.float64), s.astype(np.float64)))
        for i, j in pairs:
            inner[(i, j)] += float(np.dot(flat[i].astype(np.float64), flat[j].astype(np.float64)))
            shared[(i, j)] += int(np.count_nonzero(supports[i][tensorName] & supports[j][tensorName]))
    residual = totalNorm - sum(norms)
    for i, j in pairs:
        residual -= 2.0 * float(np.float32(lambdas[i])) * float(np.float32(lambdas[j])) * inner[(i, j)]
    key = lambda p: f"{names[p[0]]}|{names[p[1]]}"  # noqa: E731
    disjoint = OrderedDict((key(p), shared[p] == 0) for p in pairs)
    for p in pairs:
        if shared[p] == 0 and inner[p] != 0.0:
            raise InvariantViolationError(
                f"{key(p)}: supports are disjoint but the inner product is {inner[p]!r}"
            )
    default_logger().debug(f"ortho_check: residual {residual!r} over {len(tensorNames)} tensors")
    return OrthoReport(
        names,
        [float(lam) for lam in lambdas],
        OrderedDict((key(p), inner[p]) for p in pairs),
        disjoint,
        OrderedDict(zip(names, norms)),
        totalNorm,
        residual,
    )


# ---------------------------------------------------------------- overlap vs sparsity


def correlated_fixture(shape=(512, 512), sigma=1.0, seed=0):
    """τ_A ~ N(0, 1) and τ_B = τ_A + σ·N(0, 1), both F32"""
    rng = np.random.default_rng(seed)
    tauA = rng.standard_normal(shape).astype(np.float32)
    tauB = (tauA + np.float32(sigma) * rng.standard_normal(shape).astype(np.float32)).astype(np.float32)
    return tauA, tauB


def overlap_curve(tauA: np.ndarray, tauB: np.ndarray, sparsities=DEFAULT_SPARSITIES, seed=0, tensorName="tensor") -> pd.DataFrame:
    """Magnitude-pruning overlap against random-pruning overlap per sparsity,
    next to the independence expectation"""
    rows = []
    for sparsity in sparsities:
        keep = round(1.0 - sparsity, 12)
        magnitude = overlap_rate(prune_magnitude_layer(tauA, keep), prune_magnitude_layer(tauB, keep)).rate
        random = overlap_rate(
            prune_random(tauA, keep, vector_seed(seed, "a"), tensorName),
            prune_random(tauB, keep, vector_seed(seed, "b"), tensorName),
        ).rate
        rows.append(
            {
                "sparsity": sparsity,
                "keep": keep,
                "magnitude": magnitude,
                "random": random,
                "expected_random": expected_random_overlap(keep),
                "gap": magnitude - random,
            }
        )
    return pd.DataFrame(rows, columns=["sparsity", "keep", "magnitude", "random", "expected_random", "gap"])
