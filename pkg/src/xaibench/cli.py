"""Command line interface: generate, train, evaluate, tune, dump-heatmaps.

Exit codes: 0 success, 2 configuration error, 3 no eligible questions.
"""
from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import asdict
from pathlib import Path

from .attribution import METHOD_NAMES, METHODS, best_variant, parse_variant
from .harness.dataset import Dataset, DatasetParams, IoFailure, generate_dataset
from .harness.evaluation import (
    RANDOM_BASELINE,
    EvaluationConfig,
    Filters,
    NoEligibleQuestions,
    default_grid,
    run_evaluation,
    tune_methods,
)
from .harness.report import dump_heatmaps, emit_report
from .harness.training import ToyHyperparams, train_toy_model
from .masks import ShapeGeometry
from .metrics import POOLING_NAMES
from .micronet.io import ModelFileError, load_model

EXIT_CONFIG = 2
EXIT_NO_ELIGIBLE = 3


class ConfigError(ValueError):
    pass


def split_list(text: str) -> list[str]:
    """Comma-separated items; commas inside ``[...]`` stay with their variant."""
    return [s.strip() for s in re.split(r",(?![^\[]*\])", text) if s.strip()]


def parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def parse_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


def resolve_variants(items: list[str], metric: str = "mass") -> tuple[str, ...]:
    """Method names map to their tuned variant; full variant names pass through."""
    out = []
    for item in items:
        if item == RANDOM_BASELINE:
            out.append(item)
        elif "[" in item:
            out.append(parse_variant(item).name)
        elif item in METHODS:
            out.append(best_variant(item, metric).name)
        else:
            raise ConfigError(f"unknown method {item!r}; choose from {', '.join(METHOD_NAMES)}")
    return tuple(out)


def _filters(args) -> Filters:
    return Filters(
        correct_only=args.correct_only,
        min_probability=args.min_proba,
        min_gt_pixels=args.min_gt_pixels,
        question_types=tuple(split_list(args.question_types)) if args.question_types else None,
        exclude_counting=args.exclude_counting,
        exclude_exist_no=args.exclude_exist_no,
    )


def _add_eval_flags(p: argparse.ArgumentParser, tune: bool) -> None:
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default=",".join(m for m in METHOD_NAMES),
                   help="method names or full variant names, comma separated")
    p.add_argument("--poolings", default=",".join(POOLING_NAMES) if tune else "l2_norm_sq")
    p.add_argument("--metrics", default="mass,rank")
    if not tune:
        p.add_argument("--gts", default="single_object")
    p.add_argument("--correct-only", action="store_true")
    p.add_argument("--min-proba", type=float, default=0.0)
    p.add_argument("--min-gt-pixels", type=int, default=0)
    p.add_argument("--question-types", default=None)
    p.add_argument("--exclude-counting", action="store_true")
    p.add_argument("--exclude-exist-no", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xaibench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render scenes and write questions with ground-truth masks")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--size", type=parse_size, default=(32, 32))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--simple-per-scene", type=int, default=4)
    g.add_argument("--complex-per-scene", type=int, default=6)
    g.add_argument("--objects", type=parse_range, default=(3, 10), help="object count range, e.g. 3-10")
    g.add_argument("--simple-types", default="shape,color,size,material")

    t = sub.add_parser("train", help="train the toy model and save it")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=ToyHyperparams.epochs)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=ToyHyperparams.lr)
    t.add_argument("--batch", type=int, default=ToyHyperparams.batch)
    t.add_argument("--question-types", default=None)
    t.add_argument("--report", default=None, help="write held-out accuracies as JSON")

    e = sub.add_parser("evaluate", help="score methods against ground-truth masks")
    _add_eval_flags(e, tune=False)

    u = sub.add_parser("tune", help="grid search variants and poolings on GT single object")
    _add_eval_flags(u, tune=True)
    u.add_argument("--variants", default=None, help="explicit variant grid (default: each method's full grid)")
    u.add_argument("--winners", default=None, help="write the winning variant per method and metric as JSON")

    d = sub.add_parser("dump-heatmaps", help="write grayscale heatmaps for chosen questions")
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--methods", default="lrp")
    d.add_argument("--questions", required=True, help="question indices, comma separated")
    d.add_argument("--pooling", default=None)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    return parser


def cmd_generate(args) -> int:
    lo, hi = args.objects
    params = DatasetParams(
        n_scenes=args.scenes, image_size=args.size, simple_per_scene=args.simple_per_scene,
        complex_per_scene=args.complex_per_scene, object_range=(lo, hi),
        simple_types=tuple(split_list(args.simple_types)), geometry=ShapeGeometry(),
    )
    manifest = generate_dataset(params, args.seed, args.out)
    print(json.dumps(manifest["counts"], sort_keys=True))
    return 0


def cmd_train(args) -> int:
    hp = ToyHyperparams(lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed,
                        question_types=tuple(split_list(args.question_types)) if args.question_types else None)
    _, report = train_toy_model(args.data, hp, args.out, log=lambda s: print(s, flush=True))
    print(json.dumps(report.heldout_by_type, sort_keys=True))
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    return 0


def _config(args, variants, gts) -> EvaluationConfig:
    return EvaluationConfig(
        model_path=args.model, data_path=args.data, variants=variants,
        poolings=tuple(split_list(args.poolings)), gts=gts, metrics=tuple(split_list(args.metrics)),
        filters=_filters(args), seed=args.seed, workers=args.workers,
    )


def cmd_evaluate(args) -> int:
    metrics = split_list(args.metrics)
    variants = resolve_variants(split_list(args.methods), metrics[0] if metrics else "mass")
    rows = run_evaluation(_config(args, variants, tuple(split_list(args.gts))))
    emit_report(rows, args.format, args.report)
    return 0


def cmd_tune(args) -> int:
    if args.variants:
        variants = resolve_variants(split_list(args.variants))
    else:
        methods = split_list(args.methods)
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}")
        variants = default_grid(methods)
    winners, rows = tune_methods(_config(args, variants, ("single_object",)))
    emit_report(rows, args.format, args.report)
    for w in winners:
        print(f"{w.method:22s} {w.metric:5s} {w.variant} pooling={w.pooling} mean={w.mean:.6f}")
    if args.winners:
        Path(args.winners).write_text(json.dumps([asdict(w) for w in winners], indent=1) + "\n")
    return 0


def cmd_dump(args) -> int:
    model = load_model(args.model)
    data = Dataset(args.data)
    ids = [int(s) for s in split_list(args.questions)]
    variants = resolve_variants(split_list(args.methods))
    if RANDOM_BASELINE in variants:
        raise ConfigError("the random baseline has no heatmap to dump")
    for path in dump_heatmaps(model, data, variants, ids, args.out, args.pooling, args.seed):
        print(path)
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "tune": cmd_tune,
            "dump-heatmaps": cmd_dump}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NoEligibleQuestions as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_ELIGIBLE
    except (ValueError, KeyError, IoFailure, ModelFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
