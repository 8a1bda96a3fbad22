"""The `paradiff` command line.

Every subcommand reads a TOML config (see `configs/`) and writes its reports as JSON lines, with
a summary table on the console.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from rich.console import Console
from rich.table import Table

from paradiff.checkpoint import load_checkpoint
from paradiff.decoder import decode, DecodeConfig, StructurePrior
from paradiff.diffusion_data import read_corpus, write_corpus
from paradiff.experiments import (
    evaluate,
    ExperimentConfig,
    ExperimentReport,
    measure_prefill_effect,
    sweep_confident_threshold,
    sweep_length_bias,
)
from paradiff.helpers.config import build_dataclass, read_toml, table
from paradiff.helpers.exceptions import ConfigError, ParaDiffError
from paradiff.helpers.logging import configure_logging, LoggingLevels
from paradiff.history import read_history, render_history, write_history
from paradiff.model import init_params, ModelConfig, ModelParams
from paradiff.tasks import (
    CorpusConfig,
    encode_prompt,
    gen_corpus,
    TaskSpec,
    validate_corpus,
    Vocabulary,
)
from paradiff.trainer import PipelineConfig, Recipe, run_pipeline, TrainConfig

_logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class LoggingConfig:
    """The `[logging]` table; command-line options take precedence."""

    console_level: LoggingLevels = LoggingLevels.INFO
    file_level: LoggingLevels = LoggingLevels.NONE
    directory: str = "./logs"
    colored: bool = False


####################################################################################################
# Config sections
####################################################################################################
def _task_specs(document: Mapping[str, Any]) -> List[TaskSpec]:
    tables = document.get("task", {})
    if isinstance(tables, Mapping):
        tables = [tables]
    if not tables:
        msg = "the config has no [task] table"
        raise ConfigError(msg)
    return [build_dataclass(TaskSpec, t, where=f"task.{i}") for i, t in enumerate(tables)]


def _model_config(document: Mapping[str, Any], vocab: Vocabulary) -> ModelConfig:
    values: Dict[str, Any] = {"vocab_size": len(vocab), "special_tokens": vocab.special_tokens}
    values.update(table(document, "model") or {})
    return build_dataclass(ModelConfig, values, where="model")


def _pipeline_config(document: Mapping[str, Any]) -> PipelineConfig:
    train = table(document, "train") or {}
    phases: Dict[str, Any] = {}
    for name, phase in (("ar", "ar"), ("diffusion", "diffusion"), ("pure_diffusion", "diffusion")):
        values = table(document, f"train.{name}")
        if values is not None:
            phases[name] = build_dataclass(
                TrainConfig, {"phase": phase, **values}, where=f"train.{name}"
            )
    unknown = sorted(set(train) - {"ar", "diffusion", "pure_diffusion", "match_budget"})
    if unknown:
        msg = f"[train] has unknown keys: {', '.join(unknown)}"
        raise ConfigError(msg)
    return PipelineConfig(**phases, match_budget=bool(train.get("match_budget", True)))


def _decode_config(document: Mapping[str, Any], overrides: Mapping[str, Any]) -> DecodeConfig:
    values = dict(table(document, "decode") or {})
    values.update({key: value for key, value in overrides.items() if value is not None})
    return build_dataclass(DecodeConfig, values, where="decode")


def _parse_priors(specs: Sequence[str], vocab: Vocabulary) -> Optional[StructurePrior]:
    prior = StructurePrior()
    for spec in specs:
        position, separator, words = spec.partition("=")
        try:
            start = int(position)
        except ValueError:
            start = None
        if not separator or start is None:
            msg = f"a prior is POSITION=WORDS, got {spec!r}"
            raise ConfigError(msg)
        prior = prior + StructurePrior.span(start, vocab.encode(words))
    return prior if prior.entries else None


def _load_params(path: str) -> ModelParams:
    checkpoint = load_checkpoint(path)
    _logger.info("loaded %s (%s)", path, checkpoint.metadata)
    return checkpoint.params


def _print(renderable: Any) -> None:
    Console().print(renderable)


####################################################################################################
# Subcommands
####################################################################################################
def cmd_gen_corpus(args: argparse.Namespace, document: Mapping[str, Any]) -> int:
    """Generate, self-check and write a corpus."""
    vocab = Vocabulary.for_tasks()
    corpus_cfg = build_dataclass(CorpusConfig, table(document, "corpus"), where="corpus")
    size = args.size or corpus_cfg.size
    records = []
    for spec in _task_specs(document):
        generated = gen_corpus(spec, size, vocab)
        validate_corpus(spec, generated, vocab)
        records += generated
    count = write_corpus(args.out, records)
    held_out = sum(record.split == "held_out" for record in records)
    _logger.info("wrote %d records (%d held out) to %s", count, held_out, args.out)
    return 0


def cmd_train(args: argparse.Namespace, document: Mapping[str, Any]) -> int:
    """Train a model with a recipe and write checkpoints and reports."""
    vocab = Vocabulary.for_tasks()
    corpus = read_corpus(args.corpus, split="train")
    params = init_params(_model_config(document, vocab), seed=int(document.get("seed", 0)))
    recipe = Recipe(args.recipe)
    out_dir = Path(args.out_dir)
    result = run_pipeline(
        recipe, params, corpus, _pipeline_config(document), checkpoint_dir=out_dir
    )
    summary = Table(title=f"{recipe.value} training")
    for column in ("phase", "steps", "final loss", "seconds", "checkpoint"):
        summary.add_column(column)
    for report in result.reports:
        report.write_jsonl(out_dir / f"{recipe.value}-{report.phase.value}.jsonl")
        summary.add_row(
            report.phase.value,
            str(report.steps),
            f"{report.losses[-1]:.4f}" if report.losses else "-",
            f"{report.wall_clock:.1f}",
            report.checkpoint or "-",
        )
    _print(summary)
    return 0


def cmd_decode(args: argparse.Namespace, document: Mapping[str, Any]) -> int:
    """Decode the answer to one prompt."""
    vocab = Vocabulary.for_tasks()
    params = _load_params(args.checkpoint)
    cfg = _decode_config(document, {"response_length": args.response_length, "seed": args.seed})
    result = decode(
        params,
        encode_prompt(vocab, args.prompt),
        cfg,
        _parse_priors(args.prior, vocab),
        detokenize=vocab.id_to_token,
    )
    print(vocab.decode(result.answer_tokens))  # noqa: T201
    _logger.info(
        "%s after %d iterations, %.1f tokens/s",
        result.status.value,
        result.actual_iterations,
        result.stats.tokens_per_second,
    )
    if args.history:
        write_history(args.history, result.history)
    if args.render:
        print(render_history(result.history, colored=bool(args.color)))  # noqa: T201
    return 0


def _evaluation_records(args: argparse.Namespace, settings: ExperimentConfig) -> List[Any]:
    records = settings.select(read_corpus(args.corpus))
    if not records:
        msg = f"{args.corpus} has no records in split {settings.split!r}"
        raise ConfigError(msg)
    return records


def cmd_eval(args: argparse.Namespace, document: Mapping[str, Any]) -> int:
    """Evaluate exact-match accuracy on a corpus split."""
    settings = build_dataclass(ExperimentConfig, table(document, "experiment"), where="experiment")
    cfg = _decode_config(document, {})
    condition = evaluate(
        _load_params(args.checkpoint), _evaluation_records(args, settings), cfg, name="eval"
    )
    report = ExperimentReport("eval", [condition])
    _finish(report, args.out)
    return 0


def cmd_sweep(args: argparse.Namespace, document: Mapping[str, Any]) -> int:
    """Run one of the sweeps."""
    settings = build_dataclass(ExperimentConfig, table(document, "experiment"), where="experiment")
    cfg = _decode_config(document, {})
    records = _evaluation_records(args, settings)
    models: Dict[str, ModelParams] = {}
    for item in args.checkpoint:
        label, separator, path = item.partition("=")
        models[label if separator else Path(item).stem] = _load_params(path if separator else item)
    if args.kind == "length-bias":
        report = sweep_length_bias(
            models, records, settings.sweep_lengths, cfg, max_workers=settings.workers
        )
    elif args.kind == "threshold":
        report = sweep_confident_threshold(
            next(iter(models.values())), records, settings.gammas, cfg, max_workers=settings.workers
        )
    else:
        report = measure_prefill_effect(next(iter(models.values())), records, cfg).to_report()
    _finish(report, args.out)
    return 0


def cmd_render_history(args: argparse.Namespace, _document: Mapping[str, Any]) -> int:
    """Print a history file."""
    history = read_history(args.history)
    print(render_history(history, colored=bool(args.color), width=args.width))  # noqa: T201
    return 0


def _finish(report: ExperimentReport, out: Optional[str]) -> None:
    if out:
        report.write_jsonl(out)
        _logger.info("wrote %s report to %s", report.name, out)
    _print(report.summary_table())
    if report.summary:
        _print(report.summary)


####################################################################################################
# Entry point
####################################################################################################
def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser of the `paradiff` command."""
    parser = argparse.ArgumentParser(prog="paradiff", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--log-level", choices=[level.value for level in LoggingLevels])
    parser.add_argument("--log-dir", help="also write a DEBUG log file into this directory")
    parser.add_argument("--color", dest="color", action="store_const", const=True, default=None)
    parser.add_argument("--no-color", dest="color", action="store_const", const=False)
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-corpus", help="generate a synthetic corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--size", type=int, default=0, help="records per task, overrides [corpus]")
    gen.set_defaults(handler=cmd_gen_corpus)

    train = commands.add_parser("train", help="train a model")
    train.add_argument("--corpus", required=True)
    train.add_argument("--recipe", choices=[r.value for r in Recipe], default=Recipe.HYBRID.value)
    train.add_argument("--out-dir", required=True)
    train.set_defaults(handler=cmd_train)

    dec = commands.add_parser("decode", help="decode one prompt")
    dec.add_argument("--checkpoint", required=True)
    dec.add_argument("--prompt", required=True, help='user message, e.g. "copy: a b c"')
    dec.add_argument("--response-length", type=int)
    dec.add_argument("--seed", type=int)
    dec.add_argument("--prior", action="append", default=[], help="POSITION=WORDS, repeatable")
    dec.add_argument("--history", help="write the generation history to this file")
    dec.add_argument("--render", action="store_true", help="print the rendered history")
    dec.set_defaults(handler=cmd_decode)

    ev = commands.add_parser("eval", help="exact-match evaluation")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out")
    ev.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep", help="run a sweep")
    sweep.add_argument("kind", choices=["length-bias", "threshold", "prefill"])
    sweep.add_argument(
        "--checkpoint", action="append", required=True, help="[LABEL=]PATH, repeatable"
    )
    sweep.add_argument("--corpus", required=True)
    sweep.add_argument("--out")
    sweep.set_defaults(handler=cmd_sweep)

    render = commands.add_parser("render-history", help="print a history file")
    render.add_argument("history")
    render.add_argument("--width", type=int, default=100)
    render.set_defaults(handler=cmd_render_history)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the `paradiff` command.

    Returns:
        The exit status, 2 for configuration and data errors.
    """
    args = build_parser().parse_args(argv)
    try:
        document = read_toml(args.config) if args.config else {}
        logging_cfg = build_dataclass(LoggingConfig, table(document, "logging"), where="logging")
        args.color = logging_cfg.colored if args.color is None else args.color
        configure_logging(
            log_console_level=args.log_level or logging_cfg.console_level,
            log_file_level=LoggingLevels.DEBUG if args.log_dir else logging_cfg.file_level,
            log_file_directory=args.log_dir or logging_cfg.directory,
            log_colored_output=args.color,
        )
        return int(args.handler(args, document))
    except ParaDiffError as error:
        _logger.error("%s", error)  # noqa: TRY400
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
