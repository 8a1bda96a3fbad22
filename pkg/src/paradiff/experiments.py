"""Evaluation, sweeps and probes on the synthetic tasks.

Every condition of a sweep decodes its samples independently, with the decode seed derived from
the configured seed and the sample index. Conditions run on a thread pool; the report lists them
in the order they were requested.
"""

from __future__ import annotations

import dataclasses
import json
import logging

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import psutil

from rich.table import Table

from paradiff.decoder import (
    decode,
    DecodeAlgorithm,
    DecodeConfig,
    DecodeResult,
    DecodeStatus,
    StructurePrior,
)
from paradiff.diffusion_data import CorpusRecord
from paradiff.helpers.config import dataclass_to_table
from paradiff.helpers.exceptions import ConfigError
from paradiff.helpers.logging import timed
from paradiff.model import ModelParams, OpCounter
from paradiff.prefill_cache import predicted_score_ratio
from paradiff.tasks import BOX_OPEN, prompt_tokens, Vocabulary

_logger = logging.getLogger(__name__)

_T = TypeVar("_T")
_R = TypeVar("_R")

NATURAL_LENGTH = None
"""Response length marker: the answer length of every sample plus one pad slot."""


@dataclasses.dataclass(frozen=True)
class SampleOutcome:
    """Decode outcome of one evaluation sample."""

    index: int
    correct: bool
    complete: bool
    response_length: int
    remaining_tokens: int
    actual_iterations: int
    committed_tokens: int
    wall_clock: float


@dataclasses.dataclass(frozen=True)
class ConditionResult:  # pylint: disable=too-many-instance-attributes
    """Metrics of one experimental condition."""

    name: str
    settings: Dict[str, Any]
    """The knobs that distinguish the condition, JSON compatible."""
    samples: int
    accuracy: float
    """Exact-match accuracy over the samples."""
    mean_iterations: float
    iteration_ratio: float
    """Mean of actual iterations divided by response length."""
    remaining_ratio: float
    """Mean of actual iterations divided by remaining tokens."""
    tokens_per_second: float
    incomplete: int
    seed: int

    @classmethod
    def from_outcomes(
        cls, name: str, settings: Mapping[str, Any], outcomes: Sequence[SampleOutcome], seed: int
    ) -> ConditionResult:
        """Aggregate per-sample outcomes."""
        count = len(outcomes)
        seconds = sum(o.wall_clock for o in outcomes)
        return cls(
            name=name,
            settings=dict(settings),
            samples=count,
            accuracy=_mean([float(o.correct) for o in outcomes]),
            mean_iterations=_mean([float(o.actual_iterations) for o in outcomes]),
            iteration_ratio=_mean([o.actual_iterations / o.response_length for o in outcomes]),
            remaining_ratio=_mean(
                [o.actual_iterations / o.remaining_tokens for o in outcomes if o.remaining_tokens]
            ),
            tokens_per_second=sum(o.committed_tokens for o in outcomes) / seconds
            if seconds > 0
            else 0.0,
            incomplete=sum(not o.complete for o in outcomes),
            seed=seed,
        )


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else 0.0


@dataclasses.dataclass
class ExperimentReport:
    """Conditions of one experiment plus a summary."""

    name: str
    conditions: List[ConditionResult]
    config: Dict[str, Any] = dataclasses.field(default_factory=dict)
    """The decode configuration and seeds the conditions were derived from."""
    summary: Dict[str, Any] = dataclasses.field(default_factory=dict)

    def condition(self, name: str) -> ConditionResult:
        """Return a condition by name.

        Raises:
            KeyError: No condition has that name.
        """
        for condition in self.conditions:
            if condition.name == name:
                return condition
        raise KeyError(name)

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        """Write one line per condition followed by a summary line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as file:
            for condition in self.conditions:
                record = {"experiment": self.name, **dataclasses.asdict(condition)}
                file.write(json.dumps(record, sort_keys=True) + "\n")
            record = {"experiment": self.name, "config": self.config, "summary": self.summary}
            file.write(json.dumps(record, sort_keys=True) + "\n")
        return path

    def summary_table(self) -> Table:
        """Return the conditions as a rich table."""
        table = Table(title=self.name)
        table.add_column("condition")
        for column in ("samples", "accuracy", "iterations", "iter/len", "iter/remaining", "TPS"):
            table.add_column(column, justify="right")
        for c in self.conditions:
            table.add_row(
                c.name,
                str(c.samples),
                f"{c.accuracy:.3f}",
                f"{c.mean_iterations:.2f}",
                f"{c.iteration_ratio:.3f}",
                f"{c.remaining_ratio:.3f}",
                f"{c.tokens_per_second:.1f}",
            )
        return table


def _fan_out(
    function: Callable[[_T], _R], items: Sequence[_T], max_workers: Optional[int]
) -> List[_R]:
    if max_workers == 1 or len(items) <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(function, items))


####################################################################################################
# Evaluation
####################################################################################################
def sample_config(
    cfg: DecodeConfig, record: CorpusRecord, index: int, response_length: Optional[int]
) -> DecodeConfig:
    """Return the decode config of one evaluation sample.

    The window is `response_length` slots, or the answer length plus one pad slot when it is
    None. The step budget grows to at least one iteration per slot.
    """
    length = len(record.final_answer()) + 1 if response_length is None else response_length
    return dataclasses.replace(
        cfg, response_length=length, max_steps=max(cfg.max_steps, length), seed=cfg.seed + index
    )


def decode_record(  # noqa: PLR0913
    params: ModelParams,
    record: CorpusRecord,
    cfg: DecodeConfig,
    index: int = 0,
    *,
    response_length: Optional[int] = NATURAL_LENGTH,
    priors: Optional[StructurePrior] = None,
    vocab: Optional[Vocabulary] = None,
    counter: Optional[OpCounter] = None,
) -> Tuple[DecodeResult, SampleOutcome]:
    """Decode the final answer of a record and score it by exact match."""
    sample_cfg = sample_config(cfg, record, index, response_length)
    result = decode(
        params,
        prompt_tokens(record, params.config.special_tokens),
        sample_cfg,
        priors,
        detokenize=vocab.id_to_token if vocab is not None else None,
        counter=counter,
    )
    outcome = SampleOutcome(
        index=index,
        correct=result.status is DecodeStatus.COMPLETE
        and result.answer_tokens == record.final_answer(),
        complete=result.status is DecodeStatus.COMPLETE,
        response_length=sample_cfg.response_length,
        remaining_tokens=result.history.remaining_tokens,
        actual_iterations=result.actual_iterations,
        committed_tokens=result.stats.committed_tokens,
        wall_clock=result.stats.wall_clock,
    )
    return result, outcome


def evaluate(  # noqa: PLR0913
    params: ModelParams,
    records: Sequence[CorpusRecord],
    cfg: DecodeConfig,
    *,
    name: str = "eval",
    response_length: Optional[int] = NATURAL_LENGTH,
    settings: Optional[Mapping[str, Any]] = None,
) -> ConditionResult:
    """Decode every record and aggregate exact-match accuracy and iteration statistics.

    Args:
        params: The weights.
        records: The evaluation records.
        cfg: The decode configuration; the seed of sample `i` is `cfg.seed + i`.
        name: The condition name.
        response_length: A fixed window size, or None for answer length plus one pad.
        settings: The knobs to record with the condition.

    Returns:
        The metrics of the condition.
    """
    outcomes = [
        decode_record(params, record, cfg, index, response_length=response_length)[1]
        for index, record in enumerate(records)
    ]
    result = ConditionResult.from_outcomes(name, settings or {}, outcomes, cfg.seed)
    _logger.info(
        "%s: accuracy %.3f, %.2f iterations over %d samples",
        name,
        result.accuracy,
        result.mean_iterations,
        result.samples,
    )
    return result


def sweep_length_bias(
    models: Mapping[str, ModelParams],
    records: Sequence[CorpusRecord],
    lengths: Sequence[Optional[int]],
    cfg: DecodeConfig,
    *,
    max_workers: Optional[int] = None,
) -> ExperimentReport:
    """Evaluate every model at every response length.

    Records whose answer does not fit into a fixed length are left out of that condition.

    Args:
        models: Models by label, for example `{"hybrid": ..., "pure-diffusion": ...}`.
        records: The evaluation records.
        lengths: The response lengths, None standing for answer length plus one pad.
        cfg: The decode configuration shared by all conditions.
        max_workers: Threads running conditions concurrently.

    Returns:
        One condition per model and length, named `<model>@<length>`; the summary holds the
        accuracy spread (max minus min over fixed lengths) of every model.
    """
    conditions = [(label, length) for label in models for length in lengths]

    def run(condition: Tuple[str, Optional[int]]) -> ConditionResult:
        label, length = condition
        fitting = [r for r in records if length is None or len(r.final_answer()) < length]
        return evaluate(
            models[label],
            fitting,
            cfg,
            name=f"{label}@{'natural' if length is None else length}",
            response_length=length,
            settings={"model": label, "response_length": length},
        )

    results = _fan_out(run, conditions, max_workers)
    summary: Dict[str, Any] = {}
    for label in models:
        fixed = [
            r.accuracy
            for r in results
            if r.settings["model"] == label and r.settings["response_length"] is not None
        ]
        summary[f"{label}_spread"] = max(fixed) - min(fixed) if fixed else 0.0
    return ExperimentReport(
        "length-bias",
        results,
        config={"decode": dataclass_to_table(cfg), "lengths": list(lengths)},
        summary=summary,
    )


def sweep_confident_threshold(
    params: ModelParams,
    records: Sequence[CorpusRecord],
    gammas: Sequence[float],
    cfg: DecodeConfig,
    *,
    retention: float = 0.9,
    max_workers: Optional[int] = None,
) -> ExperimentReport:
    """Evaluate Confident Decoding over a threshold grid against one-slot-per-step MaskGIT.

    Args:
        params: The weights.
        records: The evaluation records.
        gammas: The thresholds.
        cfg: The decode configuration the conditions are derived from.
        retention: The fraction of baseline accuracy an efficient threshold must keep.
        max_workers: Threads running conditions concurrently.

    Returns:
        A `k=1` baseline condition and one condition per threshold. The summary names the
        threshold with the lowest `remaining_ratio` among those keeping `retention` of the
        baseline accuracy, together with that ratio.
    """
    confident = dataclasses.replace(cfg, algorithm=DecodeAlgorithm.CONFIDENT)
    configs = [("k=1", dataclasses.replace(cfg, algorithm=DecodeAlgorithm.MASKGIT, k=1))] + [
        (f"gamma={gamma:g}", dataclasses.replace(confident, gamma=gamma)) for gamma in gammas
    ]

    def run(condition: Tuple[str, DecodeConfig]) -> ConditionResult:
        name, condition_cfg = condition
        settings = {"algorithm": condition_cfg.algorithm.value}
        if condition_cfg.algorithm is DecodeAlgorithm.CONFIDENT:
            settings["gamma"] = condition_cfg.gamma
        return evaluate(params, records, condition_cfg, name=name, settings=settings)

    results = _fan_out(run, configs, max_workers)
    baseline = results[0]
    efficient = [r for r in results[1:] if r.accuracy >= retention * baseline.accuracy]
    best = min(efficient, key=lambda r: r.remaining_ratio, default=None)
    summary = {
        "baseline_accuracy": baseline.accuracy,
        "best_gamma": best.settings["gamma"] if best else None,
        "best_remaining_ratio": best.remaining_ratio if best else None,
        "best_accuracy": best.accuracy if best else None,
    }
    return ExperimentReport(
        "threshold",
        results,
        config={"decode": dataclass_to_table(cfg), "gammas": list(gammas)},
        summary=summary,
    )


####################################################################################################
# Prefilling
####################################################################################################
@dataclasses.dataclass(frozen=True)
class PrefillReport:  # pylint: disable=too-many-instance-attributes
    """Cached versus uncached decoding of the same samples.

    Per-step figures compare an uncached iteration with an iteration that reused the prompt
    cache; the full pass that builds or refreshes a cache counts only towards the arm totals.
    """

    samples: int
    mean_prompt_length: float
    mean_answer_length: float
    """Mean size of the answer window."""
    predicted_ratio: float
    """Mean predicted score-entry ratio of an uncached step to a cached step."""
    measured_step_ratio: float
    """Mean measured score-entry ratio of an uncached step to a cached step."""
    total_ratio: float
    """Score entries of the uncached arm divided by those of the cached arm."""
    uncached: ConditionResult
    cached: ConditionResult
    uncached_seconds: float
    cached_seconds: float
    uncached_step_seconds: float
    """Mean wall clock of an uncached iteration."""
    cached_step_seconds: float
    """Mean wall clock of an iteration that reused the cache."""
    uncached_rss_mib: float
    """Resident memory growth of the process during the uncached arm."""
    cached_rss_mib: float

    @property
    def speedup(self) -> float:
        """Wall-clock of the uncached arm divided by that of the cached arm."""
        return self.uncached_seconds / self.cached_seconds if self.cached_seconds > 0 else 0.0

    @property
    def step_speedup(self) -> float:
        """Wall-clock of an uncached iteration divided by that of a cached one."""
        if self.cached_step_seconds <= 0:
            return 0.0
        return self.uncached_step_seconds / self.cached_step_seconds

    @property
    def accuracy_drop(self) -> float:
        """Uncached accuracy minus cached accuracy."""
        return self.uncached.accuracy - self.cached.accuracy

    def to_report(self) -> ExperimentReport:
        """Return the two arms as an experiment report."""
        summary = {
            name: getattr(self, name)
            for name in (
                "samples",
                "mean_prompt_length",
                "mean_answer_length",
                "predicted_ratio",
                "measured_step_ratio",
                "total_ratio",
                "uncached_seconds",
                "cached_seconds",
                "uncached_step_seconds",
                "cached_step_seconds",
                "uncached_rss_mib",
                "cached_rss_mib",
                "speedup",
                "step_speedup",
                "accuracy_drop",
            )
        }
        return ExperimentReport("prefill", [self.uncached, self.cached], summary=summary)


@dataclasses.dataclass(frozen=True)
class _PrefillArm:
    condition: ConditionResult
    results: List[DecodeResult]
    seconds: float
    rss_mib: float

    @property
    def score_entries(self) -> int:
        return sum(result.stats.score_entries for result in self.results)

    def step_seconds(self, *, cached: bool) -> float:
        return _mean(
            [
                seconds
                for result in self.results
                for seconds, hit in zip(
                    result.stats.iteration_seconds, result.stats.cached_iterations
                )
                if hit is cached
            ]
        )


def _run_prefill_arm(
    params: ModelParams, records: Sequence[CorpusRecord], cfg: DecodeConfig
) -> _PrefillArm:
    process = psutil.Process()
    rss_before = process.memory_info().rss / 1024 / 1024
    label = f"prefill arm use_cache={cfg.use_cache}"
    with timed(label, logger=_logger, level=logging.INFO) as watch:
        decoded = [
            decode_record(params, record, cfg, index) for index, record in enumerate(records)
        ]
    rss_after = process.memory_info().rss / 1024 / 1024
    name = "cached" if cfg.use_cache else "uncached"
    condition = ConditionResult.from_outcomes(
        name, {"use_cache": cfg.use_cache}, [outcome for _, outcome in decoded], cfg.seed
    )
    return _PrefillArm(
        condition, [result for result, _ in decoded], watch.elapsed, rss_after - rss_before
    )


def _step_entries(result: DecodeResult, *, cached: bool) -> List[float]:
    stats = result.stats
    return [
        float(entries)
        for entries, hit in zip(stats.iteration_entries, stats.cached_iterations)
        if hit is cached
    ]


def measure_prefill_effect(
    params: ModelParams, records: Sequence[CorpusRecord], cfg: DecodeConfig
) -> PrefillReport:
    """Decode every record without and with the prompt cache.

    Both arms run sequentially on the calling thread so their wall clocks are comparable. The
    step ratios are averaged over the records whose cached decode reused the cache at least once.

    Args:
        params: The weights.
        records: The evaluation records, ideally with prompts much longer than their answers.
        cfg: The decode configuration; `use_cache` is overridden per arm.

    Returns:
        Score-entry ratios, wall clocks, accuracies and memory growth of both arms.
    """
    uncached = _run_prefill_arm(params, records, dataclasses.replace(cfg, use_cache=False))
    cached = _run_prefill_arm(params, records, dataclasses.replace(cfg, use_cache=True))
    special = params.config.special_tokens
    prompt_lengths = [len(prompt_tokens(r, special)) for r in records]
    window_lengths = [len(result.window) for result in uncached.results]
    predicted: List[float] = []
    measured: List[float] = []
    for prompt_length, plain, reused in zip(prompt_lengths, uncached.results, cached.results):
        plain_steps = _step_entries(plain, cached=False)
        cached_steps = _step_entries(reused, cached=True)
        if not plain_steps or not cached_steps:
            continue
        predicted.append(predicted_score_ratio(prompt_length, len(plain.window)))
        measured.append(_mean(plain_steps) / _mean(cached_steps))
    if not predicted:
        predicted = [predicted_score_ratio(p, a) for p, a in zip(prompt_lengths, window_lengths)]
    return PrefillReport(
        samples=len(records),
        mean_prompt_length=_mean([float(n) for n in prompt_lengths]),
        mean_answer_length=_mean([float(n) for n in window_lengths]),
        predicted_ratio=_mean(predicted),
        measured_step_ratio=_mean(measured),
        total_ratio=uncached.score_entries / cached.score_entries if cached.score_entries else 0.0,
        uncached=uncached.condition,
        cached=cached.condition,
        uncached_seconds=uncached.seconds,
        cached_seconds=cached.seconds,
        uncached_step_seconds=uncached.step_seconds(cached=False),
        cached_step_seconds=cached.step_seconds(cached=True),
        uncached_rss_mib=uncached.rss_mib,
        cached_rss_mib=cached.rss_mib,
    )


####################################################################################################
# Structure priors and early answering
####################################################################################################
@dataclasses.dataclass(frozen=True)
class PriorOutcome:
    """Result of decoding under structure priors."""

    condition: ConditionResult
    preserved: float
    """Fraction of decodes holding every prior token at its resolved slot."""


def structure_prior_experiment(  # noqa: PLR0913
    params: ModelParams,
    records: Sequence[CorpusRecord],
    cfg: DecodeConfig,
    prior_text: str,
    position: int,
    vocab: Vocabulary,
    *,
    response_length: Optional[int] = NATURAL_LENGTH,
) -> PriorOutcome:
    """Decode every record with the words of `prior_text` fixed from `position` on.

    Args:
        params: The weights.
        records: The evaluation records.
        cfg: The decode configuration.
        prior_text: Whitespace-separated prior words.
        position: The slot of the first prior word; negative values count from the window end.
        vocab: The vocabulary of the prior words.
        response_length: A fixed window size, or None for answer length plus one pad.

    Returns:
        Accuracy and iteration statistics plus the verbatim preservation rate.
    """
    priors = StructurePrior.span(position, vocab.encode(prior_text))
    outcomes: List[SampleOutcome] = []
    preserved = 0
    for index, record in enumerate(records):
        result, outcome = decode_record(
            params, record, cfg, index, response_length=response_length, priors=priors, vocab=vocab
        )
        resolved = priors.resolve(len(result.window))
        preserved += all(int(result.window[slot]) == token for slot, token in resolved.items())
        outcomes.append(outcome)
    condition = ConditionResult.from_outcomes(
        f"prior@{position}", {"prior": prior_text, "position": position}, outcomes, cfg.seed
    )
    return PriorOutcome(condition, preserved / len(records) if records else 0.0)


@dataclasses.dataclass(frozen=True)
class EarlyAnswerReport:
    """When the boxed answer commits relative to the whole decode."""

    condition: ConditionResult
    fractions: Tuple[float, ...]
    """Per sample: iteration of the first boxed answer slot divided by actual iterations."""

    @property
    def quantiles(self) -> Dict[str, float]:
        """Quartiles of the commit fractions."""
        if not self.fractions:
            return {}
        values = np.quantile(np.asarray(self.fractions), [0.25, 0.5, 0.75])
        return {"q25": float(values[0]), "median": float(values[1]), "q75": float(values[2])}


def early_answer_probe(
    params: ModelParams,
    records: Sequence[CorpusRecord],
    cfg: DecodeConfig,
    vocab: Vocabulary,
) -> EarlyAnswerReport:
    """Fix `the answer is \\box{` at its slots of a boxed arithmetic answer and time the answer.

    The prior occupies the slots the phrase has in the reference answer. The probe records the
    iteration at which the slot right after `\\box{` committed.

    Args:
        params: The weights, trained on boxed arithmetic.
        records: Boxed arithmetic records.
        cfg: The decode configuration.
        vocab: The task vocabulary.

    Returns:
        The decode metrics and the commit fraction of every sample.

    Raises:
        ConfigError: A record has no boxed answer.
    """
    phrase = vocab.encode(f"the answer is {BOX_OPEN}")
    outcomes: List[SampleOutcome] = []
    fractions: List[float] = []
    for index, record in enumerate(records):
        answer = list(record.final_answer())
        start = next(
            (
                i
                for i in range(len(answer) - len(phrase))
                if answer[i : i + len(phrase)] == phrase
            ),
            None,
        )
        if start is None:
            msg = f"record {index} holds no boxed answer"
            raise ConfigError(msg)
        result, outcome = decode_record(
            params,
            record,
            cfg,
            index,
            priors=StructurePrior.span(start, phrase),
            vocab=vocab,
        )
        outcomes.append(outcome)
        commit = result.history.slots[start + len(phrase)].iteration
        if isinstance(commit, int) and result.actual_iterations:
            fractions.append(commit / result.actual_iterations)
    condition = ConditionResult.from_outcomes("early-answer", {}, outcomes, cfg.seed)
    return EarlyAnswerReport(condition, tuple(fractions))


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """The `[experiment]` table."""

    lengths: Tuple[int, ...] = (8, 16, 32)
    """Fixed response lengths of the length-bias sweep."""
    natural_length: bool = True
    """Add an answer-length-plus-one-pad condition to the length-bias sweep."""
    gammas: Tuple[float, ...] = (0.0, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99, 1.01)
    split: str = "held_out"
    """Corpus split the experiments evaluate on."""
    limit: int = 0
    """Evaluate at most this many records, 0 evaluates all."""
    max_workers: int = 0
    """Threads running conditions, 0 lets the executor decide."""

    @property
    def sweep_lengths(self) -> List[Optional[int]]:
        """The response lengths of the length-bias sweep, None standing for the natural length."""
        natural: List[Optional[int]] = [NATURAL_LENGTH] if self.natural_length else []
        return natural + list(self.lengths)

    @property
    def workers(self) -> Optional[int]:
        """The `max_workers` argument of the sweeps."""
        return self.max_workers or None

    def select(self, records: Sequence[CorpusRecord]) -> List[CorpusRecord]:
        """Return the evaluation records of the configured split."""
        chosen = [record for record in records if record.split == self.split]
        return chosen[: self.limit] if self.limit else chosen
