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
import argparse
import json
import os
import sys
from collections import OrderedDict

from PKTaskMerge.classes import VERSION
from PKTaskMerge.classes.Analysis import balance_grid, ortho_check, overlap_rate, pairwise_overlap_matrix
from PKTaskMerge.classes.ColorText import colorText
from PKTaskMerge.classes.ConfigManager import tools
from PKTaskMerge.classes.Exceptions import CheckpointError, PKTaskMergeError, PreconditionError, UnknownTensorError
from PKTaskMerge.classes.MergeEngine import MergeRecipe, plan_recipe, run_recipe
from PKTaskMerge.classes.OutputControls import OutputControls
from PKTaskMerge.classes.SafeTensors import open_checkpoint
from PKTaskMerge.classes.SearchHarness import SearchSpec, grid_search
from PKTaskMerge.classes.TaskVector import (
    SparsityMask,
    TaskVector,
    apply_mask,
    delta,
    load_masks,
    save_task_vector,
)
from PKTaskMerge.classes.log import default_logger, setup_custom_logger

ANALYSES = ("overlap", "balance", "ortho")


def build_parser():
    argParser = argparse.ArgumentParser(
        prog="pktaskmerge", description="Merge fine-tuned checkpoints through sparse task vectors"
    )
    argParser.add_argument("-v", "--version", action="version", version=f"%(prog)s {VERSION}")
    argParser.add_argument("-t", "--threads", type=int, help="worker threads for per-tensor work")
    argParser.add_argument("-s", "--seed", type=int, help="override the recipe seed")
    argParser.add_argument("-l", "--log-level", help="DEBUG, INFO, WARNING, ...")
    argParser.add_argument("--log-file", help="also write logs to this file")
    argParser.add_argument("-o", "--output", help="override the output path of the subcommand")
    argParser.add_argument("--json", action="store_true", help="emit one JSON document on stdout")
    argParser.add_argument("--no-progress", action="store_true", help="hide progress bars")
    subParsers = argParser.add_subparsers(dest="command", required=True)

    diffParser = subParsers.add_parser("diff", help="write fine_tuned - base as a task vector checkpoint")
    diffParser.add_argument("base")
    diffParser.add_argument("fine_tuned")
    diffParser.add_argument("out", nargs="?")
    diffParser.add_argument("--name", help="task vector name stored in the file metadata")

    mergeParser = subParsers.add_parser("merge", help="run a merge recipe")
    mergeParser.add_argument("recipe")
    mergeParser.add_argument("--dry-run", action="store_true", help="validate and plan only, write nothing")

    analyzeParser = subParsers.add_parser("analyze", help="overlap, balance or orthogonality diagnostics")
    analyzeParser.add_argument("which", choices=ANALYSES)
    analyzeParser.add_argument("inputs", nargs="+", help="mask files, task vectors or checkpoints")
    analyzeParser.add_argument("--base", help="treat inputs as fine-tuned checkpoints of this base")
    analyzeParser.add_argument("--tensor", help="restrict to one tensor")
    analyzeParser.add_argument("--band-rows", type=int, default=1)
    analyzeParser.add_argument("--band-cols", type=int, default=128)
    analyzeParser.add_argument("--csv", help="balance: write the count grid here (needs --tensor)")
    analyzeParser.add_argument("--masks", nargs="+", help="ortho: mask files applied to the inputs")
    analyzeParser.add_argument("--lambdas", nargs="+", type=float, help="ortho: one λ per input")

    searchParser = subParsers.add_parser("search", help="two-step λ grid search")
    searchParser.add_argument("spec")
    searchParser.add_argument("--keep", action="store_true", help="keep intermediate merged checkpoints")
    searchParser.add_argument("--coarse-only", action="store_true")
    return argParser


def _checkFlags(args):
    if args.threads is not None and args.threads < 1:
        raise PreconditionError(f"--threads must be >= 1, got {args.threads}")
    if args.command == "analyze":
        if args.band_rows < 1 or args.band_cols < 1:
            raise PreconditionError("--band-rows and --band-cols must be >= 1")
        if args.which == "overlap" and len(args.inputs) < 2:
            raise PreconditionError("overlap needs at least two inputs")
        if args.which == "balance" and len(args.inputs) != 1:
            raise PreconditionError("balance takes exactly one input")
        if args.which == "balance" and args.csv and not args.tensor:
            raise PreconditionError("--csv needs --tensor")
        if args.which == "ortho":
            if len(args.inputs) < 2:
                raise PreconditionError("ortho needs at least two inputs")
            if args.lambdas is not None and len(args.lambdas) != len(args.inputs):
                raise PreconditionError(f"{len(args.lambdas)} --lambdas given for {len(args.inputs)} inputs")
            if args.masks is not None and len(args.masks) != len(args.inputs):
                raise PreconditionError(f"{len(args.masks)} --masks given for {len(args.inputs)} inputs")


def _name(path):
    return os.path.splitext(os.path.basename(path))[0]


def _emit(args, document, human):
    if args.json:
        OutputControls().printJson(document)
    else:
        OutputControls().printOutput(human)


# ---------------------------------------------------------------- subcommands


def cmd_diff(args):
    base = open_checkpoint(args.base)
    fineTuned = open_checkpoint(args.fine_tuned)
    out = args.output or args.out
    if not out:
        raise PreconditionError("diff needs an output path (positional or --output)")
    tau = delta(fineTuned, base, name=args.name or _name(args.fine_tuned))
    save_task_vector(tau, out)
    document = OrderedDict(
        [("task_vector", tau.name), ("tensors", len(tau)), ("parameters", tau.numel()), ("output", out)]
    )
    _emit(args, document, colorText.colored(f"Task vector {tau.name} ({len(tau)} tensors) written to {out}", colorText.GREEN))
    return document


def cmd_merge(args):
    recipe = MergeRecipe.load(args.recipe)
    recipe = recipe.copy(
        **{k: v for k, v in (("seed", args.seed), ("output", args.output)) if v is not None}
    )
    if args.dry_run:
        plan = plan_recipe(recipe)
        human = colorText.table([[k, v] for k, v in plan.items()], headers=["plan", ""])
        _emit(args, plan, human)
        return plan
    output, report = run_recipe(recipe, threads=args.threads)
    document = report.toDict()
    human = "\n".join(
        [
            colorText.colored(
                f"{report.method}: merged {report.tensorsMerged} tensors, copied {report.tensorsCopied} into {output}",
                colorText.GREEN,
            ),
            colorText.table([[n, report.lambdas[n], report.keepFractions.get(n)] for n in report.vectors],
                            headers=["vector", "λ", "keep"]),
            "Overlap (shared / kept of row vector):",
            colorText.matrix(report.vectors, report.overlapMatrix),
        ]
    )
    _emit(args, document, human)
    return document


def _loadInputMasks(args):
    if args.base:
        base = open_checkpoint(args.base)
        return [SparsityMask.nonzero(delta(open_checkpoint(p), base, name=_name(p))) for p in args.inputs]
    return [load_masks(p) for p in args.inputs]


def _restrict(mask: SparsityMask, tensorName):
    if tensorName is None:
        return mask
    if tensorName not in mask:
        raise UnknownTensorError(f"Tensor {tensorName} not found in mask")
    return SparsityMask(OrderedDict([(tensorName, mask[tensorName])]), mask.keepFraction)


def analyze_overlap(args):
    masks = [_restrict(m, args.tensor) for m in _loadInputMasks(args)]
    names = [_name(p) for p in args.inputs]
    if len(masks) == 2:
        report = overlap_rate(masks[0], masks[1])
        document = report.toDict()
        rows = [[t, d["rate"], d["shared"], d["kept_a"]] for t, d in document["per_tensor"].items()]
        human = "\n".join(
            [
                colorText.table(rows, headers=["tensor", "overlap", "shared", f"kept {names[0]}"]),
                colorText.colored(f"Overlap {names[0]} -> {names[1]}: {report.rate:.4f}", colorText.BOLD),
            ]
        )
        return document, human
    matrix = pairwise_overlap_matrix(masks, names)
    return OrderedDict([("names", names), ("matrix", matrix)]), colorText.matrix(names, matrix)


def analyze_balance(args):
    mask = _loadInputMasks(args)[0]
    tensorNames = [args.tensor] if args.tensor else mask.names()
    reports = []
    for tensorName in tensorNames:
        bits = mask[tensorName]
        if not args.tensor and (bits.ndim < 2 or bits.shape[0] < args.band_rows or bits.shape[-1] < args.band_cols):
            default_logger().debug(f"Skipping {tensorName} {list(bits.shape)}: smaller than the band")
            continue
        reports.append(balance_grid(bits, args.band_rows, args.band_cols, tensorName))
    if args.csv and reports:
        reports[0].toCsv(args.csv)
    document = OrderedDict([("band", [args.band_rows, args.band_cols]), ("tensors", [r.toDict() for r in reports])])
    rows = [[r.tensorName, r.mean, r.variance, r.cv] for r in reports]
    return document, colorText.table(rows, headers=["tensor", "mean density", "variance", "cv"])


def analyze_ortho(args):
    if args.base:
        base = open_checkpoint(args.base)
        vectors = [delta(open_checkpoint(p), base, name=_name(p)) for p in args.inputs]
    else:
        vectors = [TaskVector.fromCheckpoint(open_checkpoint(p), name=_name(p)) for p in args.inputs]
    masks = None
    if args.masks:
        masks = [load_masks(p) for p in args.masks]
        vectors = [apply_mask(v, m) for v, m in zip(vectors, masks)]
    if args.tensor:
        vectors = [v.withEntries(OrderedDict([(args.tensor, v[args.tensor])])) for v in vectors]
        masks = None if masks is None else [_restrict(m, args.tensor) for m in masks]
    lambdas = args.lambdas or [1.0] * len(vectors)
    report = ortho_check(vectors, lambdas, masks)
    rows = [[pair, value, report.disjoint[pair]] for pair, value in report.innerProducts.items()]
    human = "\n".join(
        [
            colorText.table(rows, headers=["pair", "<τ_i, τ_j>", "disjoint"], floatfmt=".6g"),
            f"‖Σ λτ‖² = {report.totalNorm:.6g}, residual = {report.residual:.3g} "
            f"(relative {report.relativeResidual:.3g})",
        ]
    )
    return report.toDict(), human


def cmd_analyze(args):
    document, human = {"overlap": analyze_overlap, "balance": analyze_balance, "ortho": analyze_ortho}[args.which](args)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2)
    _emit(args, document, human)
    return document


def cmd_search(args):
    spec = SearchSpec.load(args.spec)
    if args.seed is not None:
        spec.recipe.seed = args.seed
    if args.output:
        spec.table = args.output
    spec.keep = spec.keep or args.keep
    spec.coarseOnly = spec.coarseOnly or args.coarse_only
    result = grid_search(spec, threads=args.threads)
    document = result.toDict()
    best = ", ".join(f"{k}={v:g}" for k, v in result.bestLambdas().items())
    human = "\n".join(
        [
            colorText.table(result.table.values.tolist(), headers=list(result.table.columns)),
            colorText.colored(
                f"Best {best} (objective {result.bestScore:.6f}) after {result.evaluations} evaluations; "
                f"scores in {result.tablePath}",
                colorText.GREEN,
            ),
        ]
    )
    _emit(args, document, human)
    return document


COMMANDS = {"diff": cmd_diff, "merge": cmd_merge, "analyze": cmd_analyze, "search": cmd_search}


def main(argv=None) -> int:
    """Runs one subcommand and returns the process exit code"""
    args = build_parser().parse_args(argv)
    config = tools()
    output = OutputControls().configure(jsonMode=args.json)
    try:
        _checkFlags(args)
        config.override(threads=args.threads, logLevel=args.log_level, showProgress=False if args.no_progress else None)
        setup_custom_logger(levelname=config.logLevel or "INFO", log_file_path=args.log_file)
        COMMANDS[args.command](args)
        return 0
    except PKTaskMergeError as e:
        default_logger().debug(e, exc_info=True)
        output.printError(e)
        return e.exitCode
    except OSError as e:
        default_logger().debug(e, exc_info=True)
        error = CheckpointError(f"{type(e).__name__}: {e}")
        output.printError(error)
        return error.exitCode
    except Exception as e:
        default_logger().debug(e, exc_info=True)
        error = PKTaskMergeError(f"{type(e).__name__}: {e}")
        output.printError(error)
        return error.exitCode


def pktaskmerge():
    sys.exit(main())


if __name__ == "__main__":
    pktaskmerge()
