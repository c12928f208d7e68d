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
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from PKTaskMerge.classes.Analysis import OverlapAccumulator
from PKTaskMerge.classes.Archiver import safe_open_w
from PKTaskMerge.classes.ConfigManager import tools
from PKTaskMerge.classes.ConflictAware import FILL_BLOCK, FILL_MODES, ca_tensor
from PKTaskMerge.classes.Exceptions import CheckpointError, RecipeValidationError
from PKTaskMerge.classes.OutputControls import OutputControls
from PKTaskMerge.classes.PKTimer import PKTimer
from PKTaskMerge.classes.PKWorkerPool import iterTasks
from PKTaskMerge.classes.Pruning import (
    PruneMethod,
    PruneSpec,
    prune_balanced_nm,
    prune_magnitude_layer,
    prune_magnitude_row,
    prune_random,
    ties_elect,
    vector_seed,
)
from PKTaskMerge.classes.SafeTensors import CheckpointWriter, layout, open_checkpoint
from PKTaskMerge.classes.TaskVector import (
    check_alignment,
    deltaTensor,
    mergeTensor,
    rescaleFactor,
)
from PKTaskMerge.classes.log import default_logger, tracelog

RECIPE_VERSION = 1
PUBLISHED = "published"


class MergeMethod(str, Enum):
    TaskArithmetic = "task_arithmetic"
    Dare = "dare"
    MagnitudeLayer = "magnitude_layer"
    MagnitudeRow = "magnitude_row"
    Ties = "ties"
    Cabs = "cabs"
    CaOnly = "ca_only"
    BsOnly = "bs_only"


TRIM_MAGNITUDE = "magnitude"
TRIM_RANDOM = "random"

# Unified λ reported for large (7B-class) merges, keyed by method family and
# sparsity. DARE-family values apply to rescaled task vectors.
PUBLISHED_LAMBDAS = {
    "task_arithmetic": {0.0: 0.6},
    "magnitude": {0.25: 0.6, 0.75: 0.8, 0.9: 1.2},
    "dare": {0.25: 0.8, 0.75: 2.2, 0.9: 5.5},
    "ties": {0.25: 0.6, 0.75: 0.8, 0.9: 1.2},
    "ties_dare": {0.25: 0.8, 0.75: 2.2, 0.9: 5.5},
    "cabs": {0.25: 0.6, 0.75: 1.2, 0.9: 1.8},
}

# Unified λ reported for small (encoder-class) merges at sparsity 0.9, keyed
# by method family and the number of task vectors.
PUBLISHED_SMALL = "published_small"
PUBLISHED_SMALL_SPARSITY = 0.9
PUBLISHED_LAMBDAS_SMALL = {
    "task_arithmetic": {4: 0.48, 6: 0.49},
    "magnitude": {4: 4.61, 6: 5.61},
    "dare": {4: 1.07, 6: 1.04},
    "ties": {4: 1.88, 6: 1.88},
    "ties_dare": {4: 5.72, 6: 5.41},
    "cabs": {4: 1.74, 6: 1.64},
}

_RECIPE_KEYS = {
    "version",
    "base",
    "vectors",
    "unified_lambda",
    "method",
    "keep_fraction",
    "n",
    "m",
    "rescale",
    "seed",
    "output",
    "order",
    "fill_mode",
    "trim",
    "masks_output",
    "report",
}
_VECTOR_KEYS = {"name", "path", "lambda"}


@dataclass
class VectorSpec:
    name: str
    path: str
    lam: Optional[float] = None


@dataclass
class MergeRecipe:
    base: str
    vectors: List[VectorSpec]
    method: str = MergeMethod.TaskArithmetic.value
    unifiedLambda: Optional[object] = None
    keepFraction: Optional[float] = None
    n: Optional[int] = None
    m: Optional[int] = None
    rescale: Optional[bool] = None
    seed: Optional[int] = None
    output: Optional[str] = None
    order: Optional[List[str]] = None
    fillMode: str = FILL_BLOCK
    trim: str = TRIM_MAGNITUDE
    masksOutput: Optional[str] = None
    report: Optional[str] = None
    version: int = RECIPE_VERSION
    unknownKeys: List[str] = field(default_factory=list, repr=False)

    @staticmethod
    def fromDict(document: dict, baseDir: Optional[str] = None) -> "MergeRecipe":
        """Builds a recipe from its JSON form. Relative paths resolve against
        baseDir (the recipe file's directory). Shape errors in the document
        itself raise RecipeValidationError; value checks are validate_recipe's."""
        if not isinstance(document, dict):
            raise RecipeValidationError(["recipe must be a JSON object"])
        violations = []
        vectors = []
        rawVectors = document.get("vectors", [])
        if not isinstance(rawVectors, list):
            violations.append("vectors must be a list")
            rawVectors = []
        for i, entry in enumerate(rawVectors):
            if not isinstance(entry, dict):
                violations.append(f"vectors[{i}] must be an object")
                continue
            for key in sorted(set(entry) - _VECTOR_KEYS):
                violations.append(f"vectors[{i}]: unknown field {key!r}")
            vectors.append(
                VectorSpec(
                    name=entry.get("name"),
                    path=_resolve(entry.get("path"), baseDir),
                    lam=entry.get("lambda"),
                )
            )
        if violations:
            raise RecipeValidationError(violations)
        return MergeRecipe(
            base=_resolve(document.get("base"), baseDir),
            vectors=vectors,
            method=document.get("method", MergeMethod.TaskArithmetic.value),
            unifiedLambda=document.get("unified_lambda"),
            keepFraction=document.get("keep_fraction"),
            n=document.get("n"),
            m=document.get("m"),
            rescale=document.get("rescale"),
            seed=document.get("seed"),
            output=_resolve(document.get("output"), baseDir),
            order=document.get("order"),
            fillMode=document.get("fill_mode", FILL_BLOCK),
            trim=document.get("trim", TRIM_MAGNITUDE),
            masksOutput=_resolve(document.get("masks_output"), baseDir),
            report=_resolve(document.get("report"), baseDir),
            version=document.get("version"),
            unknownKeys=sorted(set(document) - _RECIPE_KEYS),
        )

    @staticmethod
    def load(path) -> "MergeRecipe":
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise RecipeValidationError([f"recipe is not valid JSON: {e}"]) from e
        except OSError as e:
            raise CheckpointError(f"Cannot read recipe {path}: {e}") from e
        return MergeRecipe.fromDict(document, baseDir=os.path.dirname(os.path.abspath(path)))

    def toDict(self) -> dict:
        document = OrderedDict()
        document["version"] = self.version
        document["base"] = self.base
        document["vectors"] = [
            OrderedDict((k, v) for k, v in (("name", s.name), ("path", s.path), ("lambda", s.lam)) if v is not None)
            for s in self.vectors
        ]
        document["method"] = self.method
        optional = (
            ("unified_lambda", self.unifiedLambda),
            ("keep_fraction", self.keepFraction),
            ("n", self.n),
            ("m", self.m),
            ("rescale", self.rescale),
            ("seed", self.seed),
            ("output", self.output),
            ("order", self.order),
            ("masks_output", self.masksOutput),
            ("report", self.report),
        )
        for key, value in optional:
            if value is not None:
                document[key] = value
        if self.fillMode != FILL_BLOCK:
            document["fill_mode"] = self.fillMode
        if self.trim != TRIM_MAGNITUDE:
            document["trim"] = self.trim
        return document

    def copy(self, **changes) -> "MergeRecipe":
        document = self.toDict()
        recipe = MergeRecipe.fromDict(document)
        recipe.unknownKeys = list(self.unknownKeys)
        for key, value in changes.items():
            setattr(recipe, key, value)
        return recipe

    @property
    def methodEnum(self) -> MergeMethod:
        return MergeMethod(self.method)

    @property
    def vectorNames(self) -> List[str]:
        return [v.name for v in self.vectors]

    @property
    def keep(self) -> float:
        """Keep fraction implied by the sparsity parameters (1.0 for task arithmetic)"""
        if self.keepFraction is not None:
            return float(self.keepFraction)
        if self.n is not None and self.m is not None:
            return self.n / self.m
        return 1.0

    @property
    def effectiveRescale(self) -> bool:
        if self.rescale is not None:
            return bool(self.rescale)
        return self.method == MergeMethod.Dare.value

    def publishedKey(self) -> str:
        method = self.methodEnum
        if method == MergeMethod.TaskArithmetic:
            return "task_arithmetic"
        if method in (MergeMethod.MagnitudeLayer, MergeMethod.MagnitudeRow):
            return "magnitude"
        if method == MergeMethod.Ties:
            return "ties_dare" if self.trim == TRIM_RANDOM else "ties"
        return method.value

    def resolveLambdas(self) -> List[float]:
        """One λ per vector, in recipe order"""
        if self.unifiedLambda in (PUBLISHED, PUBLISHED_SMALL):
            return [published_lambda(self)] * len(self.vectors)
        if self.unifiedLambda is not None:
            return [float(self.unifiedLambda)] * len(self.vectors)
        return [float(v.lam) for v in self.vectors]


def _resolve(path, baseDir):
    if path is None or not isinstance(path, str) or baseDir is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(baseDir, path))


def published_lambda(recipe: MergeRecipe) -> float:
    sparsity = round(1.0 - recipe.keep, 2)
    if recipe.unifiedLambda == PUBLISHED_SMALL:
        table = PUBLISHED_LAMBDAS_SMALL.get(recipe.publishedKey(), {})
        count = len(recipe.vectors)
        violations = []
        if count not in table:
            violations.append(
                f"no small-scale published λ for {recipe.publishedKey()} with {count} vectors; "
                f"known vector counts: {sorted(table)}"
            )
        if recipe.methodEnum != MergeMethod.TaskArithmetic and sparsity != PUBLISHED_SMALL_SPARSITY:
            violations.append(
                f"small-scale published λ values were found at sparsity {PUBLISHED_SMALL_SPARSITY}, got {sparsity}"
            )
        if violations:
            raise RecipeValidationError(violations)
        return table[count]
    table = PUBLISHED_LAMBDAS.get(recipe.publishedKey(), {})
    if sparsity not in table:
        raise RecipeValidationError(
            [
                f"no published λ for {recipe.publishedKey()} at sparsity {sparsity}; "
                f"known sparsities: {sorted(table)}"
            ]
        )
    return table[sparsity]


# ---------------------------------------------------------------- validation


def _isInt(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _isNumber(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def validate_recipe(recipe: MergeRecipe, requireOutput=True, requireLambdas=True, allowZeroLambda=False) -> List[str]:
    """Static checks only (no file is opened). Returns every violation found;
    an empty list means the recipe is valid. allowZeroLambda admits λ = 0
    (the λ search starts its lattice there)."""
    bound = "≥ 0" if allowZeroLambda else "> 0"

    def lambdaOk(value):
        return _isNumber(value) and (value >= 0 if allowZeroLambda else value > 0)

    violations = []
    for key in recipe.unknownKeys:
        violations.append(f"unknown field {key!r}")
    if recipe.version != RECIPE_VERSION:
        violations.append(f"version must be {RECIPE_VERSION}, got {recipe.version!r}")
    if not isinstance(recipe.base, str) or not recipe.base:
        violations.append("base checkpoint path is required")
    if requireOutput and (not isinstance(recipe.output, str) or not recipe.output):
        violations.append("output path is required")

    try:
        method = MergeMethod(recipe.method)
    except ValueError:
        violations.append(
            f"method must be one of {[m.value for m in MergeMethod]}, got {recipe.method!r}"
        )
        method = None

    names = []
    if len(recipe.vectors) == 0:
        violations.append("at least one task vector is required")
    for i, spec in enumerate(recipe.vectors):
        if not isinstance(spec.name, str) or not spec.name:
            violations.append(f"vectors[{i}]: name is required")
        else:
            names.append(spec.name)
        if not isinstance(spec.path, str) or not spec.path:
            violations.append(f"vectors[{i}]: path is required")
        if spec.lam is not None and not lambdaOk(spec.lam):
            violations.append(f"vectors[{i}]: λ must be {bound}, got {spec.lam!r}")
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        violations.append(f"vector names must be unique, repeated: {duplicates}")

    if recipe.unifiedLambda is not None:
        if recipe.unifiedLambda in (PUBLISHED, PUBLISHED_SMALL):
            if method is not None:
                try:
                    published_lambda(recipe)
                except RecipeValidationError as e:
                    violations.extend(e.violations)
        elif not lambdaOk(recipe.unifiedLambda):
            violations.append(
                f"unified_lambda must be {bound}, {PUBLISHED!r} or {PUBLISHED_SMALL!r}, got {recipe.unifiedLambda!r}"
            )
    elif requireLambdas:
        for i, spec in enumerate(recipe.vectors):
            if spec.lam is None:
                violations.append(f"vectors[{i}]: λ is required unless unified_lambda is set")

    hasKeep = recipe.keepFraction is not None
    hasNM = recipe.n is not None or recipe.m is not None
    if hasKeep and not (_isNumber(recipe.keepFraction) and 0 < recipe.keepFraction <= 1):
        violations.append(f"keep_fraction must be in (0, 1], got {recipe.keepFraction!r}")
    if hasNM:
        if not (_isInt(recipe.n) and _isInt(recipe.m)):
            violations.append(f"n and m must both be integers, got {recipe.n!r}:{recipe.m!r}")
        elif recipe.n < 1 or recipe.m < 1:
            violations.append(f"n and m must be >= 1, got {recipe.n}:{recipe.m}")
        elif recipe.n > recipe.m:
            violations.append(f"n must not exceed m, got {recipe.n}:{recipe.m}")
    if hasKeep and hasNM:
        violations.append("give either keep_fraction or n/m, not both")

    if method is not None:
        if method == MergeMethod.TaskArithmetic and (hasKeep or hasNM):
            violations.append("task_arithmetic takes no sparsity parameters")
        if method in (MergeMethod.Dare, MergeMethod.MagnitudeLayer, MergeMethod.MagnitudeRow, MergeMethod.Ties) and not hasKeep:
            violations.append(f"{method.value} requires keep_fraction")
        if method in (MergeMethod.Cabs, MergeMethod.BsOnly) and not hasNM:
            violations.append(f"{method.value} requires n and m")
        if method == MergeMethod.CaOnly and not (hasKeep or hasNM):
            violations.append("ca_only requires keep_fraction or n and m")
        if method in (MergeMethod.Ties, MergeMethod.Cabs, MergeMethod.CaOnly) and len(recipe.vectors) < 2:
            violations.append(f"{method.value} needs at least two task vectors")
        needsSeed = method == MergeMethod.Dare or (method == MergeMethod.Ties and recipe.trim == TRIM_RANDOM)
        if needsSeed and recipe.seed is None:
            violations.append(f"{method.value} requires a seed for reproducible random masks")
        if recipe.order is not None:
            if method not in (MergeMethod.Cabs, MergeMethod.CaOnly):
                violations.append("order only applies to cabs and ca_only")
            elif not isinstance(recipe.order, list) or sorted(map(str, recipe.order)) != sorted(names) or len(set(recipe.order)) != len(recipe.order):
                violations.append(f"order {recipe.order!r} must be a permutation of the vector names {names}")
        if recipe.fillMode not in FILL_MODES:
            violations.append(f"fill_mode must be one of {list(FILL_MODES)}, got {recipe.fillMode!r}")
        elif recipe.fillMode != FILL_BLOCK and method != MergeMethod.Cabs:
            violations.append("fill_mode only applies to cabs")
        if recipe.trim not in (TRIM_MAGNITUDE, TRIM_RANDOM):
            violations.append(f"trim must be {TRIM_MAGNITUDE!r} or {TRIM_RANDOM!r}, got {recipe.trim!r}")
        elif recipe.trim != TRIM_MAGNITUDE and method != MergeMethod.Ties:
            violations.append("trim only applies to ties")

    if recipe.seed is not None and not _isInt(recipe.seed):
        violations.append(f"seed must be an integer, got {recipe.seed!r}")
    if recipe.rescale is not None and not isinstance(recipe.rescale, bool):
        violations.append(f"rescale must be true or false, got {recipe.rescale!r}")
    return violations


# ---------------------------------------------------------------- masks per tensor


def tensor_masks(recipe: MergeRecipe, deltas: List[np.ndarray], tensorName: str) -> List[Optional[np.ndarray]]:
    """Mask bits of every vector for one tensor, in recipe order. None means
    the whole tensor is kept."""
    method = recipe.methodEnum
    if method == MergeMethod.TaskArithmetic:
        return [None] * len(deltas)
    if deltas[0].size == 0:
        return [np.zeros(deltas[0].shape, dtype=bool) for _ in deltas]
    keep = recipe.keep
    names = recipe.vectorNames
    if method == MergeMethod.Dare:
        return [
            prune_random(d, keep, vector_seed(recipe.seed, name), tensorName) for d, name in zip(deltas, names)
        ]
    if method == MergeMethod.MagnitudeLayer:
        return [prune_magnitude_layer(d, keep) for d in deltas]
    if method == MergeMethod.MagnitudeRow:
        return [prune_magnitude_row(d, keep) for d in deltas]
    if method == MergeMethod.BsOnly:
        return [prune_balanced_nm(d, recipe.n, recipe.m) for d in deltas]
    if method == MergeMethod.Ties:
        if recipe.trim == TRIM_RANDOM:
            trimmed = [
                prune_random(d, keep, vector_seed(recipe.seed, name), tensorName) for d, name in zip(deltas, names)
            ]
        else:
            trimmed = [prune_magnitude_layer(d, keep) for d in deltas]
        return ties_elect(deltas, trimmed, tensorName)
    if method == MergeMethod.Cabs:
        spec = PruneSpec(PruneMethod.BalancedNM, n=recipe.n, m=recipe.m)
        fillMode = recipe.fillMode
    else:
        spec = PruneSpec(PruneMethod.MagnitudeLayer, keepFraction=keep)
        fillMode = FILL_BLOCK
    order = recipe.order or names
    position = {name: i for i, name in enumerate(names)}
    ordered = ca_tensor([deltas[position[name]] for name in order], spec, fillMode, tensorName)
    byName = dict(zip(order, ordered))
    return [byName[name] for name in names]


# ---------------------------------------------------------------- run


@dataclass
class TensorResult:
    name: str
    merged: Optional[np.ndarray] = None
    raw: Optional[bytes] = None
    masks: Optional[List[Optional[np.ndarray]]] = None
    size: int = 0


@dataclass
class RunReport:
    method: str
    vectors: List[str]
    lambdas: Dict[str, float]
    output: Optional[str]
    keepFractions: Dict[str, Optional[float]] = field(default_factory=OrderedDict)
    overlapMatrix: List[List[Optional[float]]] = field(default_factory=list)
    perTensor: Dict[str, dict] = field(default_factory=OrderedDict)
    tensorsMerged: int = 0
    tensorsCopied: int = 0
    rescale: bool = False
    threads: int = 1
    wallTime: float = 0.0
    masks: Dict[str, str] = field(default_factory=OrderedDict)

    def toDict(self):
        return {
            "method": self.method,
            "vectors": self.vectors,
            "lambdas": self.lambdas,
            "output": self.output,
            "rescale": self.rescale,
            "keep_fractions": self.keepFractions,
            "overlap_matrix": self.overlapMatrix,
            "per_tensor": self.perTensor,
            "tensors_merged": self.tensorsMerged,
            "tensors_copied": self.tensorsCopied,
            "threads": self.threads,
            "wall_time": self.wallTime,
            "masks": self.masks,
        }

    def save(self, path):
        try:
            safe_open_w(path)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.toDict(), f, indent=2)
        except OSError as e:
            raise CheckpointError(f"Cannot write report {path}: {e}") from e
        return path


def _openInputs(recipe: MergeRecipe):
    base = open_checkpoint(recipe.base)
    finetuned = []
    for spec in recipe.vectors:
        ckpt = open_checkpoint(spec.path, name=spec.name)
        check_alignment(ckpt, base)
        finetuned.append(ckpt)
    return base, finetuned


def _ensureValid(recipe: MergeRecipe, allowZeroLambda=False):
    violations = validate_recipe(recipe, allowZeroLambda=allowZeroLambda)
    if violations:
        raise RecipeValidationError(violations)


@tracelog
def plan_recipe(recipe: MergeRecipe) -> dict:
    """Validates the recipe and its checkpoint headers; reads no tensor data
    and writes nothing."""
    _ensureValid(recipe)
    base, finetuned = _openInputs(recipe)
    floating = [m for m in base.metas if m.isFloating]
    return OrderedDict(
        [
            ("method", recipe.method),
            ("vectors", recipe.vectorNames),
            ("lambdas", OrderedDict(zip(recipe.vectorNames, recipe.resolveLambdas()))),
            ("keep", recipe.keep),
            ("rescale", recipe.effectiveRescale),
            ("order", recipe.order or recipe.vectorNames),
            ("tensors_merged", len(floating)),
            ("tensors_copied", len(base.metas) - len(floating)),
            ("parameters_merged", int(sum(m.numel for m in floating))),
            ("output", recipe.output),
        ]
    )


@tracelog
def run_recipe(
    recipe: MergeRecipe, threads: Optional[int] = None, showProgress: Optional[bool] = None, allowZeroLambda=False
):
    """Executes the recipe, streaming one tensor at a time. Returns
    (output path, RunReport)."""
    _ensureValid(recipe, allowZeroLambda=allowZeroLambda)
    config = tools()
    threads = threads if threads is not None else config.threads
    showProgress = config.showProgress if showProgress is None else showProgress
    lambdas = recipe.resolveLambdas()
    factor = rescaleFactor(recipe.keep) if recipe.effectiveRescale else None
    names = recipe.vectorNames
    report = RunReport(
        method=recipe.method,
        vectors=names,
        lambdas=OrderedDict(zip(names, lambdas)),
        output=recipe.output,
        rescale=recipe.effectiveRescale,
        threads=threads,
    )

    with PKTimer(name="run_recipe") as timer:
        base, finetuned = _openInputs(recipe)

        def processTensor(tensorName):
            meta = base.meta(tensorName)
            if not meta.isFloating:
                return TensorResult(tensorName, raw=base.read_raw(tensorName))
            baseValues = base.read_f32(tensorName)
            deltas = [deltaTensor(ckpt.read_f32(tensorName), baseValues, tensorName) for ckpt in finetuned]
            masks = tensor_masks(recipe, deltas, tensorName)
            if factor is not None and factor != 1:
                deltas = [np.multiply(d, factor, dtype=np.float32) for d in deltas]
            merged = mergeTensor(baseValues, zip(deltas, masks, lambdas), tensorName)
            return TensorResult(tensorName, merged=merged, masks=masks, size=meta.numel)

        accumulator = OverlapAccumulator(names)
        maskWriters = _maskWriters(recipe, base)
        try:
            with CheckpointWriter(recipe.output, base.metas, template=base) as writer:
                tasks = [(n, (n,)) for n in base.names()]
                with OutputControls().progressBar(len(tasks), title="Merging", enabled=showProgress) as progress:
                    for tensorName, result in iterTasks(processTensor, tasks, threads=threads):
                        if result.raw is not None:
                            writer.writeRaw(tensorName, result.raw)
                            report.tensorsCopied += 1
                        else:
                            writer.write(tensorName, result.merged)
                            accumulator.add(tensorName, result.masks, result.size)
                            for maskWriter, bits in zip(maskWriters, result.masks):
                                maskWriter.write(
                                    tensorName, np.ones(result.merged.shape, dtype=bool) if bits is None else bits
                                )
                            report.tensorsMerged += 1
                        progress()
            for maskWriter in maskWriters:
                maskWriter.close()
        except BaseException:
            for maskWriter in maskWriters:
                maskWriter.abort()
            raise

    report.wallTime = timer.elapsed
    report.keepFractions = accumulator.keepFractions()
    report.overlapMatrix = accumulator.matrix()
    report.perTensor = accumulator.perTensor
    report.masks = OrderedDict((name, w.path) for name, w in zip(names, maskWriters))
    if recipe.report:
        report.save(recipe.report)
    default_logger().info(
        f"Merged {report.tensorsMerged} tensors ({report.tensorsCopied} copied) into {recipe.output} "
        f"in {report.wallTime:.3f}s"
    )
    return recipe.output, report


def _maskWriters(recipe: MergeRecipe, base) -> List[CheckpointWriter]:
    if not recipe.masksOutput:
        return []
    os.makedirs(recipe.masksOutput, exist_ok=True)
    metas = layout((m.name, "BOOL", m.shape) for m in base.metas if m.isFloating)
    writers = []
    for spec in recipe.vectors:
        metadata = {"task_vector": spec.name, "keep_fraction": repr(recipe.keep), "method": recipe.method}
        path = os.path.join(recipe.masksOutput, f"{spec.name}.safetensors")
        writers.append(CheckpointWriter(path, metas, metadata).open())
    return writers
