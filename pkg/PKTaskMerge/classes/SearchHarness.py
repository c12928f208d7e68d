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
import json
import math
import os
import subprocess
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import pandas as pd
from filelock import FileLock

from PKTaskMerge.classes import Archiver
from PKTaskMerge.classes.ConfigManager import tools
from PKTaskMerge.classes.Exceptions import (
    CheckpointError,
    EvaluatorError,
    RecipeValidationError,
)
from PKTaskMerge.classes.MergeEngine import MergeRecipe, run_recipe, validate_recipe
from PKTaskMerge.classes.OutputControls import OutputControls
from PKTaskMerge.classes.PKTimer import PKTimer
from PKTaskMerge.classes.PKWorkerPool import iterTasks
from PKTaskMerge.classes.log import default_logger, tracelog

MODE_UNIFIED = "unified"
MODE_PER_VECTOR = "per_vector"
DEFAULT_RANGE = (0.0, 3.0)
DEFAULT_COARSE_STEP = 0.1
DEFAULT_FINE_STEP = 0.01
MAX_PER_VECTOR = 2
LAMBDA_DIGITS = 10
_SPEC_KEYS = {
    "recipe",
    "range",
    "coarse_step",
    "fine_step",
    "mode",
    "evaluator",
    "weights",
    "coarse_only",
    "keep",
    "workspace",
    "table",
    "parallelism",
    "timeout",
}


@dataclass
class EvalResult:
    scores: Dict[str, float]
    wallTime: float = 0.0

    def objective(self, weights: Optional[Dict[str, float]] = None) -> float:
        """Unweighted mean of task scores unless weights are given"""
        if not weights:
            return sum(self.scores.values()) / len(self.scores)
        total = sum(weights.get(task, 0.0) for task in self.scores)
        if total <= 0:
            raise EvaluatorError(f"weights {weights} give no weight to tasks {sorted(self.scores)}")
        return sum(weights.get(task, 0.0) * score for task, score in self.scores.items()) / total


@dataclass
class SearchSpec:
    recipe: MergeRecipe
    evaluator: List[str]
    lo: float = DEFAULT_RANGE[0]
    hi: float = DEFAULT_RANGE[1]
    coarseStep: float = DEFAULT_COARSE_STEP
    fineStep: float = DEFAULT_FINE_STEP
    mode: str = MODE_UNIFIED
    weights: Optional[Dict[str, float]] = None
    coarseOnly: bool = False
    keep: bool = False
    workspace: Optional[str] = None
    table: Optional[str] = None
    parallelism: Optional[int] = None
    timeout: Optional[float] = None

    @staticmethod
    def fromDict(document: dict, baseDir: Optional[str] = None) -> "SearchSpec":
        if not isinstance(document, dict):
            raise RecipeValidationError(["search spec must be a JSON object"])
        violations = [f"unknown field {key!r}" for key in sorted(set(document) - _SPEC_KEYS)]
        rawRecipe = document.get("recipe")
        if isinstance(rawRecipe, str):
            recipePath = rawRecipe if baseDir is None or os.path.isabs(rawRecipe) else os.path.join(baseDir, rawRecipe)
            recipe = MergeRecipe.load(recipePath)
        elif isinstance(rawRecipe, dict):
            recipe = MergeRecipe.fromDict(rawRecipe, baseDir=baseDir)
        else:
            violations.append("recipe must be a path or an inline recipe object")
            recipe = None
        evaluator = document.get("evaluator")
        if isinstance(evaluator, str):
            evaluator = [evaluator]
        valueRange = document.get("range", list(DEFAULT_RANGE))
        if not (isinstance(valueRange, list) and len(valueRange) == 2):
            violations.append("range must be [lo, hi]")
            valueRange = list(DEFAULT_RANGE)
        if violations:
            raise RecipeValidationError(violations)
        resolve = lambda p: p if p is None or baseDir is None or os.path.isabs(p) else os.path.join(baseDir, p)  # noqa: E731
        return SearchSpec(
            recipe=recipe,
            evaluator=evaluator,
            lo=valueRange[0],
            hi=valueRange[1],
            coarseStep=document.get("coarse_step", DEFAULT_COARSE_STEP),
            fineStep=document.get("fine_step", DEFAULT_FINE_STEP),
            mode=document.get("mode", MODE_UNIFIED),
            weights=document.get("weights"),
            coarseOnly=document.get("coarse_only", False),
            keep=document.get("keep", False),
            workspace=resolve(document.get("workspace")),
            table=resolve(document.get("table")),
            parallelism=document.get("parallelism"),
            timeout=document.get("timeout"),
        )

    @staticmethod
    def load(path) -> "SearchSpec":
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise RecipeValidationError([f"search spec is not valid JSON: {e}"]) from e
        except OSError as e:
            raise CheckpointError(f"Cannot read search spec {path}: {e}") from e
        return SearchSpec.fromDict(document, baseDir=os.path.dirname(os.path.abspath(path)))

    def validate(self) -> List[str]:
        violations = [
            f"recipe: {v}" for v in validate_recipe(self.recipe, requireOutput=False, requireLambdas=False)
        ]
        numbers = (("range lo", self.lo), ("range hi", self.hi), ("coarse_step", self.coarseStep), ("fine_step", self.fineStep))
        for label, value in numbers:
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                violations.append(f"{label} must be a finite number, got {value!r}")
        if violations:
            return violations
        if not self.lo < self.hi:
            violations.append(f"range must satisfy lo < hi, got [{self.lo}, {self.hi}]")
        if self.lo < 0:
            violations.append("λ range must not go below 0")
        if self.coarseStep <= 0 or self.fineStep <= 0:
            violations.append("steps must be > 0")
        elif self.fineStep > self.coarseStep:
            violations.append(f"fine_step {self.fineStep} must not exceed coarse_step {self.coarseStep}")
        if self.mode not in (MODE_UNIFIED, MODE_PER_VECTOR):
            violations.append(f"mode must be {MODE_UNIFIED!r} or {MODE_PER_VECTOR!r}, got {self.mode!r}")
        elif self.mode == MODE_PER_VECTOR and len(self.recipe.vectors) > MAX_PER_VECTOR:
            violations.append(
                f"per_vector mode supports at most {MAX_PER_VECTOR} task vectors, use unified mode for "
                f"{len(self.recipe.vectors)}"
            )
        if not isinstance(self.evaluator, list) or len(self.evaluator) == 0 or not all(isinstance(a, str) for a in self.evaluator):
            violations.append("evaluator must be a non-empty command (list of strings)")
        if self.weights is not None and (
            not isinstance(self.weights, dict)
            or not all(isinstance(w, (int, float)) and not isinstance(w, bool) and w >= 0 for w in self.weights.values())
        ):
            violations.append("weights must map task names to non-negative numbers")
        if self.parallelism is not None and (not isinstance(self.parallelism, int) or self.parallelism < 1):
            violations.append(f"parallelism must be a positive integer, got {self.parallelism!r}")
        if self.timeout is not None and (not isinstance(self.timeout, (int, float)) or self.timeout <= 0):
            violations.append(f"timeout must be > 0 seconds, got {self.timeout!r}")
        return violations

    @property
    def dimensions(self) -> int:
        return len(self.recipe.vectors) if self.mode == MODE_PER_VECTOR else 1

    def lambdaColumns(self) -> List[str]:
        if self.mode == MODE_PER_VECTOR:
            return [f"lambda_{name}" for name in self.recipe.vectorNames]
        return ["lambda"]


@dataclass
class SearchResult:
    best: Tuple[float, ...]
    bestScore: float
    coarseBest: Tuple[float, ...]
    evaluations: int
    table: pd.DataFrame
    tablePath: Optional[str] = None
    lambdaColumns: List[str] = field(default_factory=list)

    def bestLambdas(self) -> Dict[str, float]:
        return OrderedDict(zip(self.lambdaColumns, self.best))

    def toDict(self):
        return {
            "best": self.bestLambdas(),
            "best_score": self.bestScore,
            "coarse_best": OrderedDict(zip(self.lambdaColumns, self.coarseBest)),
            "evaluations": self.evaluations,
            "table": self.tablePath,
        }


# ---------------------------------------------------------------- evaluator


@tracelog
def invoke_evaluator(command, merged_checkpoint_path, timeout=None) -> EvalResult:
    """Runs `<command...> <checkpoint-path>` and parses the single JSON object
    {task: score} it prints on stdout."""
    if not os.path.isfile(merged_checkpoint_path):
        raise CheckpointError(f"Merged checkpoint {merged_checkpoint_path} does not exist")
    argv = list(command) + [os.fspath(merged_checkpoint_path)]
    with PKTimer() as timer:
        try:
            completed = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as e:
            raise EvaluatorError(f"Evaluator timed out after {timeout}s: {' '.join(argv)}") from e
        except OSError as e:
            raise EvaluatorError(f"Evaluator could not be started: {e}") from e
    if completed.returncode != 0:
        stderrTail = (completed.stderr or "").strip().splitlines()[-5:]
        raise EvaluatorError(
            f"Evaluator exited with status {completed.returncode}: " + " | ".join(stderrTail)
        )
    try:
        document = json.loads(completed.stdout)
    except json.JSONDecodeError as e:
        raise EvaluatorError(f"Evaluator output is not a JSON object: {completed.stdout[:200]!r}") from e
    if not isinstance(document, dict) or len(document) == 0:
        raise EvaluatorError(f"Evaluator must print a non-empty JSON object, got {completed.stdout[:200]!r}")
    scores = OrderedDict()
    for task, score in document.items():
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise EvaluatorError(f"Score for {task!r} is not a number: {score!r}")
        if not math.isfinite(score):
            raise EvaluatorError(f"Score for {task!r} is not finite: {score!r}")
        scores[str(task)] = float(score)
    return EvalResult(scores, timer.elapsed)


# ---------------------------------------------------------------- grid


def lattice(lo: float, hi: float, step: float) -> List[float]:
    """lo, lo + step, ... up to hi inclusive, rounded so that points computed
    from different origins compare equal"""
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, LAMBDA_DIGITS) for i in range(count)]


def fine_window(center: float, spec: SearchSpec) -> List[float]:
    """Fine lattice within one coarse step of center; center itself is always
    a candidate, even when fine_step does not divide coarse_step"""
    lo = round(max(spec.lo, center - spec.coarseStep), LAMBDA_DIGITS)
    hi = round(min(spec.hi, center + spec.coarseStep), LAMBDA_DIGITS)
    return sorted(set(lattice(lo, hi, spec.fineStep)) | {round(center, LAMBDA_DIGITS)})


def _argmax(points, cache, weights):
    """Highest objective; ties go to the smaller λ (lexicographically)"""
    best, bestScore = None, -math.inf
    for point in sorted(points):
        score = cache[point].objective(weights)
        if best is None or score > bestScore:
            best, bestScore = point, score
    return best, bestScore


class GridSearch:
    """Two-step λ search: a coarse lattice over the whole range, then a fine
    lattice within one coarse step of the coarse optimum. Every λ point is
    evaluated at most once."""

    def __init__(self, spec: SearchSpec, threads=None, evaluate=None):
        violations = spec.validate()
        if violations:
            raise RecipeValidationError(violations)
        config = tools()
        self.spec = spec
        self.threads = threads if threads is not None else config.threads
        self.parallelism = spec.parallelism or config.evaluatorParallelism
        self.timeout = spec.timeout if spec.timeout is not None else config.evaluatorTimeout
        self.cache: Dict[Tuple[float, ...], EvalResult] = OrderedDict()
        self.phases: Dict[Tuple[float, ...], str] = {}
        self.workspace = None
        self._evaluate = evaluate or self.evaluatePoint

    def recipeFor(self, point: Tuple[float, ...], output: str) -> MergeRecipe:
        recipe = self.spec.recipe.copy(output=output, masksOutput=None, report=None)
        if self.spec.mode == MODE_UNIFIED:
            recipe.unifiedLambda = point[0]
        else:
            recipe.unifiedLambda = None
            for vector, lam in zip(recipe.vectors, point):
                vector.lam = lam
        return recipe

    def evaluatePoint(self, point: Tuple[float, ...]) -> EvalResult:
        label = "_".join(f"{lam:.{LAMBDA_DIGITS}f}" for lam in point)
        output = os.path.join(self.workspace, f"merged_{label}.safetensors")
        run_recipe(self.recipeFor(point, output), threads=self.threads, showProgress=False, allowZeroLambda=True)
        try:
            return invoke_evaluator(self.spec.evaluator, output, timeout=self.timeout)
        finally:
            if not self.spec.keep and os.path.exists(output):
                os.remove(output)

    def evaluateAll(self, points, phase, progress):
        pending = [p for p in points if p not in self.cache]
        tasks = [(p, (p,)) for p in pending]
        for point, result in iterTasks(self._evaluate, tasks, threads=self.parallelism):
            self.cache[point] = result
            self.phases[point] = phase
            default_logger().info(
                f"{phase} λ={point} objective={result.objective(self.spec.weights):.6f} scores={dict(result.scores)}"
            )
            progress()

    def grid(self, axes) -> List[Tuple[float, ...]]:
        return [tuple(p) for p in itertools.product(*axes)]

    def table(self) -> pd.DataFrame:
        columns = self.spec.lambdaColumns()
        tasks = []
        for result in self.cache.values():
            for task in result.scores:
                if task not in tasks:
                    tasks.append(task)
        rows = []
        for point in sorted(self.cache):
            result = self.cache[point]
            row = OrderedDict(zip(columns, point))
            row["phase"] = self.phases[point]
            for task in tasks:
                row[task] = result.scores.get(task)
            row["mean"] = result.objective(self.spec.weights)
            row["wall_time"] = result.wallTime
            rows.append(row)
        return pd.DataFrame(rows, columns=columns + ["phase"] + tasks + ["mean", "wall_time"])

    def tablePath(self) -> str:
        if self.spec.table:
            return self.spec.table
        return os.path.join(Archiver.get_user_reports_dir(self._rootDir()), "search_scores.csv")

    def saveTable(self) -> str:
        path = self.tablePath()
        Archiver.safe_open_w(path)
        with FileLock(f"{path}.lck"):
            self.table().to_csv(path, index=False)
        return path

    def _rootDir(self):
        return self.spec.workspace or tools().workspaceDir

    def run(self) -> SearchResult:
        spec = self.spec
        axis = lattice(spec.lo, spec.hi, spec.coarseStep)
        coarse = self.grid([axis] * spec.dimensions)
        self.workspace = Archiver.get_user_temp_dir(self._rootDir())
        try:
            with OutputControls().progressBar(len(coarse), title="Coarse λ", enabled=tools().showProgress) as progress:
                self.evaluateAll(coarse, "coarse", progress)
            coarseBest, _ = _argmax(coarse, self.cache, spec.weights)
            candidates = coarse
            if not spec.coarseOnly:
                fine = self.grid([fine_window(center, spec) for center in coarseBest])
                with OutputControls().progressBar(len(fine), title="Fine λ", enabled=tools().showProgress) as progress:
                    self.evaluateAll(fine, "fine", progress)
                candidates = fine
            best, bestScore = _argmax(candidates, self.cache, spec.weights)
        except BaseException:
            if self.cache:
                path = self.saveTable()
                default_logger().info(f"Search aborted, partial score table saved to {path}")
            raise
        finally:
            if not spec.keep:
                Archiver.removeDirIfEmpty(self.workspace)
        path = self.saveTable()
        return SearchResult(
            best=best,
            bestScore=bestScore,
            coarseBest=coarseBest,
            evaluations=len(self.cache),
            table=self.table(),
            tablePath=path,
            lambdaColumns=spec.lambdaColumns(),
        )


@tracelog
def grid_search(spec: SearchSpec, threads=None, evaluate=None) -> SearchResult:
    """Best λ (one per dimension) plus the full score table. `evaluate`
    replaces the merge + external evaluator step (a callable taking the λ
    tuple and returning an EvalResult)."""
    return GridSearch(spec, threads=threads, evaluate=evaluate).run()
