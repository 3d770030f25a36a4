"""Command-line surface: one verb per pipeline stage.

Exit codes are a stable scripting contract: 0 success, 2 input or validation
problem, 3 run failure (training, backend, or numeric trouble).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .backend import BackendHandle, handshake
from .corpus import LabelKind, Subtask, parse_labels
from .errors import (
    AugmentError,
    BackendError,
    CorpusIOError,
    FormatError,
    ManifestVersionError,
    NewsclfError,
    NumericError,
    PipelineError,
    ValidationError,
)
from .metrics import official_measure, score_multiclass, score_multilabel
from .pipeline import (
    ExperimentConfig,
    ReportRow,
    SelectionRecord,
    Setup,
    load_experiment_config,
    render_report,
    render_report_tsv,
    report_rows_from_selection,
    run_matrix,
    stage_augment,
    stage_predict,
    stage_select,
    stage_split,
    stage_sweep,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUN = 3

INPUT_ERRORS = (ValidationError, FormatError, CorpusIOError, ManifestVersionError)
RUN_ERRORS = (PipelineError, NumericError, BackendError, AugmentError)


@dataclass
class CommandContext:
    config: ExperimentConfig
    jobs: int
    verbosity: int


def _load_context(args) -> CommandContext:
    config_path = Path(args.workdir) / args.config if args.workdir else Path(args.config)
    if not config_path.is_file():
        raise ValidationError(f"config file not found: {config_path}")
    config = load_experiment_config(config_path)
    if args.root_seed is not None:
        config = replace(config, root_seed=args.root_seed)
    return CommandContext(config=config, jobs=args.jobs, verbosity=args.verbose)


def cmd_gen_demo(args) -> int:
    from .demo import generate_demo

    config_path = generate_demo(Path(args.target), seed=args.seed)
    print(config_path)
    return EXIT_OK


def cmd_split(args) -> int:
    ctx = _load_context(args)
    pair = stage_split(ctx.config, Subtask(args.subtask), args.language)
    print(f"train={len(pair.train)} validation={len(pair.validation)}")
    return EXIT_OK


def cmd_augment(args) -> int:
    ctx = _load_context(args)
    backend = None
    try:
        if args.backend_cmd:
            backend = BackendHandle.spawn(args.backend_cmd.split())
            handshake(backend)
        augmented = stage_augment(
            ctx.config, Subtask(args.subtask), args.language, jobs=ctx.jobs, backend=backend
        )
    finally:
        if backend is not None:
            backend.close()
    print(f"instances={len(augmented)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    ctx = _load_context(args)
    best_path, _ = stage_sweep(
        ctx.config, Subtask(args.subtask), args.language, Setup(args.setup)
    )
    print(best_path)
    return EXIT_OK


def cmd_select(args) -> int:
    ctx = _load_context(args)
    record = stage_select(ctx.config, Subtask(args.subtask), args.language)
    forced = " (forced: no training data)" if record.forced else ""
    print(f"{record.setup}{forced}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ctx = _load_context(args)
    path = stage_predict(ctx.config, Subtask(args.subtask), args.language)
    print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ctx = _load_context(args)
    subtask = Subtask(args.subtask)
    space = ctx.config.label_space(subtask)
    gold = parse_labels(Path(args.gold), space)
    predicted = parse_labels(Path(args.predictions), space)
    if space.kind is LabelKind.MULTICLASS:
        report = score_multiclass(
            {k: next(iter(v)) for k, v in gold.items()},
            {k: next(iter(v)) for k, v in predicted.items() if v},
            space,
        )
    else:
        report = score_multilabel(gold, predicted, space)
    official = official_measure(subtask)
    for name in (official, "f1_macro" if official == "f1_micro" else "f1_micro"):
        tag = "  (official)" if name == official else ""
        print(f"{name}  {getattr(report, name):.3f}{tag}")
    print(f"instances  {report.n_instances}")
    return EXIT_OK


def _selection_report_rows(config: ExperimentConfig, subtask: Subtask) -> list[ReportRow]:
    selections_dir = config.work_root / "selections" / subtask.value
    rows: list[ReportRow] = []
    if not selections_dir.is_dir():
        return rows
    for path in sorted(selections_dir.glob("*.json")):
        record = SelectionRecord.load(path)
        rows.extend(report_rows_from_selection(record, subtask))
    return rows


def cmd_report(args) -> int:
    ctx = _load_context(args)
    subtask = Subtask(args.subtask)
    rows = _selection_report_rows(ctx.config, subtask)
    renderer = render_report_tsv if args.tsv else render_report
    sys.stdout.write(renderer(subtask, rows))
    return EXIT_OK


def cmd_matrix(args) -> int:
    ctx = _load_context(args)
    result = run_matrix(ctx.config, jobs=ctx.jobs)
    print(result.summary())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="newsclf",
        description="Multilingual news-classification experiment pipeline.",
    )
    parser.add_argument("--config", default="config.yaml", help="experiment config file")
    parser.add_argument("--workdir", default=None, help="resolve the config path against this directory")
    parser.add_argument("--root-seed", type=int, default=None, help="override the configured root seed")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel workers")
    parser.add_argument("-v", "--verbose", action="count", default=0)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demo", help="generate a synthetic corpus + config (bootstrap; needs no config)")
    p.add_argument("target")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gen_demo, needs_config=False)

    p = sub.add_parser("split", help="write the 80-20 train/validation split")
    p.add_argument("subtask", choices=[s.value for s in Subtask])
    p.add_argument("language")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="augment a staged train split")
    p.add_argument("subtask", choices=[s.value for s in Subtask])
    p.add_argument("language")
    p.add_argument("--backend-cmd", default=None, help="command line of a fill-capable backend")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("sweep", help="train k seeds for one cell, print best manifest path")
    p.add_argument("subtask", choices=[s.value for s in Subtask])
    p.add_argument("language", help="language, or 'multilingual' with --setup multi")
    p.add_argument("--setup", choices=[s.value for s in Setup], default="mono")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("select", help="choose the setup for a language on dev data")
    p.add_argument("subtask", choices=[s.value for s in Subtask])
    p.add_argument("language")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("predict", help="write test predictions for a language")
    p.add_argument("subtask", choices=[s.value for s in Subtask])
    p.add_argument("language")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a predictions file against gold labels")
    p.add_argument("subtask", choices=[s.value for s in Subtask])
    p.add_argument("gold")
    p.add_argument("predictions")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render the per-language dev leaderboard")
    p.add_argument("subtask", choices=[s.value for s in Subtask])
    p.add_argument("--tsv", action="store_true", help="tab-separated instead of aligned text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("matrix", help="run every stage for every configured cell")
    p.set_defaults(func=cmd_matrix)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except RUN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUN
    except NewsclfError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUN


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
