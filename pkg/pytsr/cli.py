"""Command-line entry point: ``tsr <command> [options]``."""

import argparse
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from .config import ExperimentConfig, apply_overrides, load_config
from .corpus import build_manifest, read_manifest, render_corpus, write_manifest
from .errors import ConfigError, ManifestError, PyTSRError, RecipeError
from .evaluation import compare_models, evaluate, read_report, render_comparison, write_report
from .log import setup_logging, step_logger
from .pipeline import load_recipe, recipe_names, run_recipe, run_single_inference
from .trainer import compose_stage, default_ladder, run_stage

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3

_VALIDATION_ERRORS = (ConfigError, ManifestError, RecipeError)


def _config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    return apply_overrides(config, args.set) if args.set else config


def _cmd_sim(args: argparse.Namespace) -> int:
    config = _config(args)
    out = Path(args.out)
    records = build_manifest(args.split, args.size, config.seed, config.corpus)
    if args.render:
        records = render_corpus(records, out, config.corpus, config.stft, progress=args.progress)
    path = write_manifest(records, out / f"{args.split}.json")
    print(path)
    return EXIT_OK


def _train(args: argparse.Namespace, stage: str) -> int:
    config = _config(args)
    checkpoints = Path(args.checkpoints)
    out = Path(args.out) if args.out else checkpoints
    if stage == "model_ii":
        result = compose_stage(
            "model_ii",
            [("extractor", ["embedder", "extractor"]), ("rnnt_clean", ["recognizer"])],
            {
                "extractor": checkpoints / "extractor.ckpt",
                "rnnt_clean": checkpoints / "rnnt_clean.ckpt",
            },
            out,
            config,
        )
        print(result.checkpoint)
        return EXIT_OK
    specs = {spec.name: spec for spec in default_ladder(config)}
    if stage not in specs:
        known = sorted(specs) + ["model_ii"]
        raise ConfigError(f"unknown stage {stage!r}; expected one of {known}")
    spec = specs[stage]
    result = run_stage(
        spec,
        read_manifest(args.train),
        read_manifest(args.dev),
        {name: checkpoints / f"{name}.ckpt" for name in spec.prerequisites},
        out,
        config,
        progress=args.progress,
    )
    print(result.checkpoint)
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    return _train(args, args.stage)


def _cmd_decode(args: argparse.Namespace) -> int:
    result = run_single_inference(
        args.mixture,
        args.enrollment,
        args.model,
        mode=args.mode,
        beam_size=args.beam,
        use_front_end=False if args.no_front_end else None,
    )
    print(result.transcript)
    return EXIT_OK


def _cmd_infer(args: argparse.Namespace) -> int:
    result = run_single_inference(
        args.mixture,
        args.enrollment,
        args.model,
        out_dir=args.out,
        mode=args.mode,
        beam_size=args.beam,
        use_front_end=False if args.no_front_end else None,
    )
    print(result.transcript)
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate(
        args.model,
        read_manifest(args.manifest),
        mode=args.mode,
        condition=args.condition,
        beam_size=args.beam,
        label=args.label,
        use_front_end=False if args.no_front_end else None,
        progress=args.progress,
    )
    write_report(report, args.report)
    print(f"{report.model}: CER {100.0 * report.overall.cer:.2f}%")
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    table = compare_models([read_report(path) for path in args.reports])
    print(render_comparison(table))
    if args.json:
        Path(args.json).write_text(table.model_dump_json(indent=2), encoding="utf-8")
    return EXIT_OK


def _cmd_run_recipe(args: argparse.Namespace) -> int:
    config = _config(args)
    sizes = {
        key: value
        for key, value in (
            ("train_size", args.train_size),
            ("dev_size", args.dev_size),
            ("test_size", args.test_size),
        )
        if value is not None
    }
    recipe = load_recipe(args.recipe, config, **sizes)
    summary = run_recipe(recipe, args.run_dir, config, progress=args.progress)
    ran = sum(1 for s in summary.steps if s.executed)
    print(f"{recipe.name}: {ran} of {len(summary.steps)} steps executed in {args.run_dir}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Experiment config JSON")
    parser.add_argument("--seed", type=int, help="Override the root seed")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="Dotted config override"
    )
    parser.add_argument("--progress", action="store_true", help="Show progress bars")


def _add_decoding(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=["greedy", "beam"], default="greedy")
    parser.add_argument("--beam", type=int, help="Beam size")
    parser.add_argument(
        "--no-front-end", action="store_true", help="Decode the mixture without extraction"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsr", description="Target-speaker speech recognition experiments"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    parser.add_argument("--log-file", help="Also write logs to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="Simulate a mixture manifest")
    _add_common(sim)
    sim.add_argument("--split", choices=["train", "dev", "test"], default="train")
    sim.add_argument("--size", type=int, required=True, help="Number of records")
    sim.add_argument("--out", required=True, help="Output directory")
    sim.add_argument("--render", action="store_true", help="Also render WAV files")
    sim.set_defaults(func=_cmd_sim)

    commands = (("train-embedder", "embedder"), ("train-extractor", "extractor"), ("train", None))
    for name, stage in commands:
        train = sub.add_parser(name, help=f"Run the {stage or 'named'} training stage")
        _add_common(train)
        if stage is None:
            train.add_argument("--stage", required=True, help="Stage name, e.g. model_iii")
            train.set_defaults(func=_cmd_train)
        else:
            train.set_defaults(func=lambda args, stage=stage: _train(args, stage))
        train.add_argument("--train", required=True, help="Training manifest")
        train.add_argument("--dev", required=True, help="Dev manifest")
        train.add_argument("--checkpoints", required=True, help="Directory of finished stages")
        train.add_argument("--out", help="Output directory (defaults to --checkpoints)")

    decode = sub.add_parser("decode", help="Print the transcript of one mixture")
    decode.add_argument("--model", required=True, help="Checkpoint")
    decode.add_argument("--mixture", required=True, help="Mixture WAV")
    decode.add_argument("--enrollment", help="Enrollment WAV")
    _add_decoding(decode)
    decode.set_defaults(func=_cmd_decode)

    infer = sub.add_parser("infer", help="Transcribe and write enhanced audio and traces")
    infer.add_argument("--model", required=True, help="Checkpoint")
    infer.add_argument("--mixture", required=True, help="Mixture WAV")
    infer.add_argument("--enrollment", help="Enrollment WAV")
    infer.add_argument("--out", required=True, help="Output directory")
    _add_decoding(infer)
    infer.set_defaults(func=_cmd_infer)

    ev = sub.add_parser("eval", help="Score a checkpoint on a manifest")
    ev.add_argument("--model", required=True, help="Checkpoint")
    ev.add_argument("--manifest", required=True, help="Test manifest")
    ev.add_argument("--report", required=True, help="Report JSON to write")
    ev.add_argument("--condition", choices=["noisy", "clean"], default="noisy")
    ev.add_argument("--label", help="Model label in the report")
    ev.add_argument("--progress", action="store_true", help="Show progress bars")
    _add_decoding(ev)
    ev.set_defaults(func=_cmd_eval)

    compare = sub.add_parser("compare", help="Compare reports, baseline first")
    compare.add_argument("reports", nargs="+", help="Report JSON files")
    compare.add_argument("--json", help="Also write the table as JSON")
    compare.set_defaults(func=_cmd_compare)

    recipe = sub.add_parser("run-recipe", help="Run an experiment recipe")
    _add_common(recipe)
    recipe.add_argument(
        "--recipe", default="paper-ladder", help=f"Builtin ({', '.join(recipe_names())}) or JSON"
    )
    recipe.add_argument("--run-dir", required=True, help="Run directory")
    recipe.add_argument("--train-size", type=int)
    recipe.add_argument("--dev-size", type=int)
    recipe.add_argument("--test-size", type=int)
    recipe.set_defaults(func=_cmd_run_recipe)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level.upper(), args.log_file)
    log = step_logger(__name__, args.command)
    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except _VALIDATION_ERRORS as e:
        log.error("%s", e)
        return EXIT_INVALID
    except PyTSRError as e:
        log.error("%s", e)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
