"""Command-line surface: gen, train, eval, vote, gradcheck, sweep, ablate, report, pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from tools.feature_dataset import FeatureFileError
from tools.generate_markdown_report import RunReportGenerator, load_metrics

from discovery.config import AppConfig, ConfigError, RunConfig, parse_k_grid
from discovery.services.experiments import ABLATION_VARIANTS, run_ablation, run_sweep
from discovery.services.pipeline_runner import (
    run_evaluation,
    run_generate,
    run_gradcheck,
    run_pipeline,
    run_training,
    run_vote_dump,
    write_eval_report,
)
from discovery.services.serializers import eval_report_json, gradcheck_lines
from discovery.services.storage import CheckpointError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _stderr_logger(message: str) -> None:
    timestamp = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")
    for line in message.strip("\n").splitlines() or [""]:
        print(f"[{timestamp}] {line}", file=sys.stderr)


def _quiet_logger(message: str) -> None:
    return None


def _parse_set(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}", key=pair)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = _parse_set(args.set)
    return config.with_overrides(overrides) if overrides else config


def _parse_grid(raw: Optional[str]) -> Optional[List[int]]:
    if raw is None:
        return None
    try:
        grid = parse_k_grid(raw)
    except ValueError:
        raise ConfigError(f"Invalid --k-grid {raw!r}", key="eval.k_grid") from None
    return None if grid is None else list(grid)


def cmd_gen(args, logger) -> int:
    config = _load_config(args)
    result = run_generate(config, args.out, logger=logger)
    print(f"{result['classes']} classes, {result['records']} records ({result['labeled']} labeled) -> {result['path']}")
    return EXIT_OK


def cmd_train(args, logger) -> int:
    config = _load_config(args)
    result = run_training(config, args.data, args.out, args.metrics, logger=logger)
    print(f"{result['epochs']} epochs -> {result['checkpoint']}, {result['metrics']}")
    return EXIT_OK


def cmd_eval(args, logger) -> int:
    config = _load_config(args)
    report = run_evaluation(
        config,
        args.data,
        args.checkpoint,
        k=args.k,
        estimate=args.estimate_k,
        k_grid=_parse_grid(args.k_grid),
        space=args.space,
        logger=logger,
    )
    if args.out:
        write_eval_report(config, report, args.out)
    print(eval_report_json(report))
    return EXIT_OK


def cmd_vote(args, logger) -> int:
    config = _load_config(args)
    result = run_vote_dump(config, args.data, args.checkpoint, args.out, logger=logger)
    print(f"{result['records']} records, {result['levels']} levels -> {result['counts']}, {result['scores']}")
    return EXIT_OK


def cmd_gradcheck(args, logger) -> int:
    config = _load_config(args)
    report = run_gradcheck(config, corrupt=args.corrupt, logger=logger)
    for line in gradcheck_lines(report):
        print(line)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_sweep(args, logger) -> int:
    config = _load_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    scores = run_sweep(config, args.data, args.key, values, args.out, logger=logger)
    for score in scores:
        print(f"{score.label}={score.value}\tall={score.all_acc:.4f}\told={score.old_acc:.4f}\tnew={score.new_acc:.4f}")
    return EXIT_OK


def cmd_ablate(args, logger) -> int:
    config = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    medians = run_ablation(config, args.data, args.out, seeds=seeds, variants=variants, logger=logger)
    for name, value in medians.items():
        print(f"{name}\tmedian_all_acc={value:.4f}")
    return EXIT_OK


def cmd_report(args, logger) -> int:
    metrics = load_metrics(args.metrics)
    evaluation = json.loads(Path(args.eval_report).read_text(encoding="utf-8"))
    report = RunReportGenerator(metrics, evaluation).generate()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report, encoding="utf-8")
        logger(f"Report saved to {args.out}")
    else:
        sys.stdout.write(report)
    return EXIT_OK


def cmd_pipeline(args, logger) -> int:
    config = _load_config(args)
    result = run_pipeline(config, args.out_dir, logger=logger)
    print(json.dumps(result["eval"], sort_keys=True))
    return EXIT_OK


def build_parser(app: Optional[AppConfig] = None) -> argparse.ArgumentParser:
    app = app or AppConfig.from_env()
    parser = argparse.ArgumentParser(prog="discovery", description="Generalized category discovery over feature triples")
    parser.add_argument("--threads", type=int, default=app.threads, help="worker cap (results do not depend on it)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines on stderr")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file of dotted key = value lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic feature file")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen)

    train = sub.add_parser("train", parents=[common], help="two-stage training")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--metrics", required=True, help="per-epoch metrics CSV path")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", parents=[common], help="cluster, match and score")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--checkpoint")
    k_choice = evaluate.add_mutually_exclusive_group()
    k_choice.add_argument("--k", type=int)
    k_choice.add_argument("--estimate-k", action="store_true")
    evaluate.add_argument("--k-grid", help="'a:b' or 'a,b,c'; defaults to eval.k_grid")
    evaluate.add_argument("--space", choices=("raw_st", "proj_stf"))
    evaluate.add_argument("--out", help="also write the report JSON here")
    evaluate.set_defaults(handler=cmd_eval)

    vote = sub.add_parser("vote", parents=[common], help="dump vote counts and consistency scores")
    vote.add_argument("--data", required=True)
    vote.add_argument("--checkpoint", required=True)
    vote.add_argument("--out", required=True, help="vote count CSV; scores go to <stem>_scores.csv")
    vote.set_defaults(handler=cmd_vote)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gradcheck.add_argument("--corrupt", metavar="TENSOR", help="shift one analytic gradient (negative control)")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    sweep = sub.add_parser("sweep", parents=[common], help="train and evaluate once per value of one key")
    sweep.add_argument("--data", required=True)
    sweep.add_argument("--key", required=True)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(handler=cmd_sweep)

    ablate = sub.add_parser("ablate", parents=[common], help="compare module ablations")
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--seeds", help="comma-separated train seeds")
    ablate.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATION_VARIANTS)}")
    ablate.set_defaults(handler=cmd_ablate)

    report = sub.add_parser("report", help="markdown summary of a run")
    report.add_argument("--metrics", required=True)
    report.add_argument("--eval-report", required=True)
    report.add_argument("--out")
    report.set_defaults(handler=cmd_report)

    pipeline = sub.add_parser("pipeline", parents=[common], help="gen, train and eval into one directory")
    pipeline.add_argument("--out-dir", default=app.artifact_dir)
    pipeline.set_defaults(handler=cmd_pipeline)
    return parser


def main(argv: Optional[Sequence[str]] = None, logger: Optional[Callable[[str], None]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if logger is None:
        logger = _quiet_logger if args.quiet else _stderr_logger
    if args.threads < 1:
        logger(f"Config error: --threads must be >= 1, got {args.threads}")
        return EXIT_CONFIG

    try:
        return args.handler(args, logger)
    except (FeatureFileError, CheckpointError) as exc:
        logger(f"I/O error: {exc}")
        return EXIT_IO
    except ValueError as exc:
        logger(f"Config error: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        logger(f"I/O error: {exc}")
        return EXIT_IO
    except FloatingPointError as exc:
        logger(f"Numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
