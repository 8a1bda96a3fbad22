"""Iterative parallel decoding of an answer window.

Every iteration runs the model over `prompt + window`, scores the still-masked slots by
confidence, selects a subset of them and commits a token to each selected slot. Committed slots
are never re-masked.

Position selection and token sampling draw from two independent random streams. With
[`ConfidenceSource.PRE_REVISION`][paradiff.decoder.ConfidenceSource.PRE_REVISION] the selected
slots therefore do not depend on temperature, top-p or top-k.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time

from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from paradiff.diffusion_data import Segment, TokenSequence
from paradiff.helpers.exceptions import ConfigError, NonFiniteError, SequenceLengthError
from paradiff.helpers.logging import configure_logging, timed
from paradiff.history import GenerationHistory, MASKED, PAD, PRIOR, SlotRecord
from paradiff.model import (
    as_token_batch,
    AttentionMode,
    forward,
    forward_trace,
    ModelParams,
    OpCounter,
    TokensLike,
)
from paradiff.prefill_cache import build_cache, KVCache, step_with_cache

_logger = logging.getLogger(__name__)


class DecodeAlgorithm(Enum):
    """How the slots to commit are chosen in each iteration."""

    MASKGIT = "maskgit"
    """Commit the `k` most confident slots."""
    CONFIDENT = "confident"
    """Commit every slot whose confidence reaches `gamma`, with a fallback when none does."""


class Fallback(Enum):
    """What Confident Decoding commits when no slot reaches the threshold."""

    HIGHEST_CONFIDENCE = "highest_confidence"
    """The single most confident slot."""
    RANDOM = "random"
    """`fallback_k` slots drawn uniformly without replacement."""
    TOP_K = "top_k"
    """The `fallback_k` most confident slots."""


class ConfidenceMeasure(Enum):
    """Scalar certainty of a predicted distribution, higher is more confident."""

    MAX_PROB = "max_prob"
    """The largest probability."""
    NEG_ENTROPY = "neg_entropy"
    """The negated entropy, never positive."""
    MARGIN = "margin"
    """The difference between the two largest probabilities."""


class ConfidenceSource(Enum):
    """Which distribution the confidence is computed from."""

    PRE_REVISION = "pre_revision"
    """The plain softmax of the logits."""
    POST_REVISION = "post_revision"
    """The distribution after temperature, top-k and top-p."""


class DecodeStatus(Enum):
    """Outcome of a decode."""

    COMPLETE = "complete"
    INCOMPLETE = "incomplete"
    """`max_steps` ran out with masked slots left."""


@dataclasses.dataclass(frozen=True)
class DecodeConfig:  # pylint: disable=too-many-instance-attributes
    """Every knob of a decode."""

    response_length: int = 16
    """Size of the answer window."""
    max_steps: int = 16
    algorithm: DecodeAlgorithm = DecodeAlgorithm.CONFIDENT
    k: int = 1
    """Slots per MaskGIT iteration; 0 spreads the open slots evenly over the remaining steps."""
    gamma: float = 0.9
    """Confidence threshold of Confident Decoding, any value >= 0 is accepted."""
    fallback: Fallback = Fallback.HIGHEST_CONFIDENCE
    fallback_k: int = 1
    temperature: float = 0.0
    """0 selects the most likely token."""
    top_p: float = 1.0
    top_k: int = 0
    """0 disables top-k truncation."""
    confidence_measure: ConfidenceMeasure = ConfidenceMeasure.MAX_PROB
    confidence_source: ConfidenceSource = ConfidenceSource.PRE_REVISION
    selection_temperature: float = 0.0
    """0 selects slots greedily by confidence, larger values sample them."""
    attention_mode: AttentionMode = AttentionMode.FULL
    use_cache: bool = False
    """Reuse the prompt keys and values of the first iteration."""
    cache_refresh_interval: int = 0
    """Rebuild the cache every this many iterations, 0 never rebuilds it."""
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the ranges.

        Raises:
            ConfigError: A value is outside its range.
        """
        checks = {
            "response_length must be >= 1": self.response_length >= 1,
            "max_steps must be >= 1": self.max_steps >= 1,
            "k must be >= 0": self.k >= 0,
            "fallback_k must be >= 1": self.fallback_k >= 1,
            "gamma must be >= 0": self.gamma >= 0.0,
            "temperature must be >= 0": self.temperature >= 0.0,
            "top_p must be in (0, 1]": 0.0 < self.top_p <= 1.0,
            "top_k must be >= 0": self.top_k >= 0,
            "selection_temperature must be >= 0": self.selection_temperature >= 0.0,
            "cache_refresh_interval must be >= 0": self.cache_refresh_interval >= 0,
        }
        failed = [message for message, ok in checks.items() if not ok]
        if failed:
            msg = "; ".join(failed)
            raise ConfigError(msg)


@dataclasses.dataclass(frozen=True)
class StructurePrior:
    """Tokens fixed at answer slots before decoding starts.

    Negative positions count from the end of the window, `-1` being the last slot.
    """

    entries: Tuple[Tuple[int, int], ...] = ()

    @classmethod
    def span(cls, start: int, tokens: Sequence[int]) -> StructurePrior:
        """Create a prior placing consecutive tokens from `start` on.

        Examples:
            >>> StructurePrior.span(-3, [7, 8]).resolve(10)
            {7: 7, 8: 8}
        """
        return cls(tuple((start + offset, int(token)) for offset, token in enumerate(tokens)))

    def __add__(self, other: StructurePrior) -> StructurePrior:
        """Combine two priors."""
        return StructurePrior(self.entries + other.entries)

    def resolve(self, response_length: int) -> Dict[int, int]:
        """Return the slot to token map for a window of the given length.

        Raises:
            ConfigError: A position falls outside the window or two entries share a slot.
        """
        resolved: Dict[int, int] = {}
        for position, token in self.entries:
            slot = position + response_length if position < 0 else position
            if not 0 <= slot < response_length:
                msg = f"prior position {position} is outside a window of {response_length}"
                raise ConfigError(msg)
            if slot in resolved:
                msg = f"two priors resolve to slot {slot}"
                raise ConfigError(msg)
            resolved[slot] = token
        return resolved


####################################################################################################
# Distributions, confidences and selection
####################################################################################################
def revise_probs(
    logits: np.ndarray, temperature: float, top_p: float = 1.0, top_k: int = 0
) -> np.ndarray:
    """Turn logits into the distribution tokens are sampled from.

    Works on a single row or on the last axis of a matrix. Temperature 0 gives a one-hot vector at
    the first maximum. Otherwise the softmax of `logits / temperature` is truncated to the `top_k`
    most likely tokens and to the smallest prefix (by descending probability) whose mass reaches
    `top_p`, then renormalised.

    Examples:
        >>> revise_probs(np.array([0.0, 0.0]), 1.0).tolist()
        [0.5, 0.5]
        >>> np.round(revise_probs(np.log(np.array([2.0, 1.0])), 1.0), 4).tolist()
        [0.6667, 0.3333]
        >>> revise_probs(np.array([0.1, 3.0, -2.0]), 0.0).tolist()
        [0.0, 1.0, 0.0]

    Args:
        logits: Shape (V,) or (N, V).
        temperature: `>= 0`.
        top_p: Nucleus mass in (0, 1], 1 disables the truncation.
        top_k: Number of tokens kept, 0 disables the truncation.

    Returns:
        Float64 probabilities of the same shape.

    Raises:
        NonFiniteError: A row contains NaN or +inf, or only -inf.
        ConfigError: `temperature` or `top_p` is out of range.
    """
    z = np.asarray(logits, dtype=np.float64)
    if temperature < 0.0 or not 0.0 < top_p <= 1.0:
        msg = f"temperature must be >= 0 and top_p in (0, 1], got {temperature} and {top_p}"
        raise ConfigError(msg)
    if np.isnan(z).any() or np.isposinf(z).any() or np.isneginf(z.max(axis=-1)).any():
        msg = "logit rows must be finite or -inf, with at least one finite entry"
        raise NonFiniteError(msg)
    if temperature == 0.0:
        probs = np.zeros_like(z)
        np.put_along_axis(probs, z.argmax(axis=-1)[..., np.newaxis], 1.0, axis=-1)
        return probs
    scaled = z / temperature
    probs = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    if top_k or top_p < 1.0:
        order = np.argsort(-probs, axis=-1, kind="stable")
        ranked = np.take_along_axis(probs, order, axis=-1)
        keep = np.ones_like(ranked, dtype=bool)
        if top_k:
            keep[..., top_k:] = False
        if top_p < 1.0:
            keep &= (np.cumsum(ranked, axis=-1) - ranked) < top_p
        mask = np.zeros_like(keep)
        np.put_along_axis(mask, order, keep, axis=-1)
        probs = np.where(mask, probs, 0.0)
        probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def confidence(probs: np.ndarray, measure: ConfidenceMeasure) -> np.ndarray:
    """Score distributions by certainty, along the last axis.

    Examples:
        >>> float(confidence(np.array([0.7, 0.2, 0.1]), ConfidenceMeasure.MAX_PROB))
        0.7
        >>> round(float(confidence(np.array([0.5, 0.5]), ConfidenceMeasure.NEG_ENTROPY)), 4)
        -0.6931

    Args:
        probs: Shape (V,) or (N, V).
        measure: The confidence measure.

    Returns:
        The confidence, shape () or (N,).
    """
    if measure is ConfidenceMeasure.MAX_PROB:
        return probs.max(axis=-1)
    if measure is ConfidenceMeasure.NEG_ENTROPY:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
        return terms.sum(axis=-1)
    if probs.shape[-1] == 1:
        return probs[..., 0]
    top_two = -np.partition(-probs, 1, axis=-1)[..., :2]
    return top_two[..., 0] - top_two[..., 1]


def select_maskgit(
    confidences: np.ndarray,
    k: int,
    *,
    selection_temperature: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Select the `min(k, n)` most confident of `n` open slots.

    Ties go to the lowest index. With a positive `selection_temperature` the slots are sampled
    without replacement in proportion to `softmax(confidence / selection_temperature)` instead.

    Examples:
        >>> select_maskgit(np.array([0.9, 0.1, 0.5]), 2).tolist()
        [0, 2]

    Args:
        confidences: One confidence per open slot.
        k: The number of slots to select, at least 1.
        selection_temperature: 0 for greedy selection.
        rng: Required when `selection_temperature` is positive.

    Returns:
        The selected indices into `confidences`, ascending.
    """
    count = min(k, confidences.shape[0])
    if selection_temperature > 0.0:
        if rng is None:
            msg = "sampled selection needs a random generator"
            raise ConfigError(msg)
        keys = confidences / selection_temperature + rng.gumbel(size=confidences.shape)
    else:
        keys = confidences
    return np.sort(np.argsort(-keys, kind="stable")[:count])


def select_confident(  # noqa: PLR0913
    confidences: np.ndarray,
    gamma: float,
    fallback: Fallback,
    rng: np.random.Generator,
    *,
    fallback_k: int = 1,
    selection_temperature: float = 0.0,
) -> np.ndarray:
    """Select every open slot whose confidence reaches `gamma`, or apply the fallback.

    Examples:
        >>> rng = np.random.default_rng(0)
        >>> fallback = Fallback.HIGHEST_CONFIDENCE
        >>> select_confident(np.array([0.95, 0.5, 0.99]), 0.9, fallback, rng).tolist()
        [0, 2]
        >>> select_confident(np.array([0.5, 0.6]), 0.9, fallback, rng).tolist()
        [1]

    Args:
        confidences: One confidence per open slot.
        gamma: The threshold.
        fallback: What to select when no slot reaches the threshold.
        rng: The selection random stream.
        fallback_k: Slots selected by the Random and TopK fallbacks.
        selection_temperature: Passed to the TopK fallback.

    Returns:
        The selected indices into `confidences`, ascending.
    """
    chosen = np.flatnonzero(confidences >= gamma)
    if chosen.size:
        return chosen
    if fallback is Fallback.HIGHEST_CONFIDENCE:
        return np.array([int(np.argmax(confidences))])
    if fallback is Fallback.RANDOM:
        count = min(fallback_k, confidences.shape[0])
        return np.sort(rng.choice(confidences.shape[0], size=count, replace=False))
    return select_maskgit(
        confidences, fallback_k, selection_temperature=selection_temperature, rng=rng
    )


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cumulative = np.cumsum(probs, axis=-1)
    draws = rng.random(probs.shape[0]) * cumulative[:, -1]
    picks = (cumulative <= draws[:, np.newaxis]).sum(axis=-1)
    return np.minimum(picks, probs.shape[-1] - 1)


####################################################################################################
# Decode loop
####################################################################################################
_OPEN = 0
_PRIOR = -1


@dataclasses.dataclass(frozen=True, eq=False)
class DecodeState:
    """The answer window between two iterations."""

    window: np.ndarray
    """Token per slot, `[MASK]` for open slots."""
    committed_at: np.ndarray
    """Per slot: the committing iteration (>= 1), 0 while open, -1 for priors."""
    iteration: int
    selection_rng: np.random.Generator
    sampling_rng: np.random.Generator
    cache: Optional[KVCache] = None

    @property
    def open_slots(self) -> np.ndarray:
        """The indices of the slots that are still masked."""
        return np.flatnonzero(self.committed_at == _OPEN)


@dataclasses.dataclass(frozen=True)
class StepRecord:
    """What one iteration committed."""

    iteration: int
    slots: Tuple[int, ...]
    tokens: Tuple[int, ...]


@dataclasses.dataclass(frozen=True)
class DecodeStats:
    """Instrumentation of a decode."""

    forward_passes: int
    score_entries: int
    iteration_seconds: Tuple[float, ...]
    committed_tokens: int
    iteration_entries: Tuple[int, ...] = ()
    """Score entries of every iteration."""
    cached_iterations: Tuple[bool, ...] = ()
    """Per iteration: whether it reused a prompt cache instead of running a full pass."""

    @property
    def wall_clock(self) -> float:
        """Seconds spent in the decode loop."""
        return float(sum(self.iteration_seconds))

    @property
    def tokens_per_second(self) -> float:
        """Committed tokens per second of decode loop."""
        return self.committed_tokens / self.wall_clock if self.wall_clock > 0 else 0.0


@dataclasses.dataclass(frozen=True, eq=False)
class DecodeResult:
    """Output of [`decode()`][paradiff.decoder.decode]."""

    status: DecodeStatus
    window: np.ndarray
    """The final answer window, pads included."""
    answer_tokens: Tuple[int, ...]
    """The window without its trailing pad run."""
    sequence: TokenSequence
    """Prompt followed by the answer tokens."""
    history: GenerationHistory
    committed_at: np.ndarray
    steps: Tuple[StepRecord, ...]
    stats: DecodeStats

    @property
    def actual_iterations(self) -> int:
        """The number of iterations run."""
        return self.history.actual_iterations


def initial_state(
    params: ModelParams,
    cfg: DecodeConfig,
    priors: Optional[StructurePrior] = None,
    cache: Optional[KVCache] = None,
) -> DecodeState:
    """Create the window of iteration 0: priors in place, every other slot masked."""
    window = np.full(cfg.response_length, params.config.mask_id, dtype=np.int64)
    committed_at = np.zeros(cfg.response_length, dtype=np.int64)
    for slot, token in (priors or StructurePrior()).resolve(cfg.response_length).items():
        window[slot] = token
        committed_at[slot] = _PRIOR
    selection_seed, sampling_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    return DecodeState(
        window=window,
        committed_at=committed_at,
        iteration=0,
        selection_rng=np.random.default_rng(selection_seed),
        sampling_rng=np.random.default_rng(sampling_seed),
        cache=cache,
    )


def _window_logits(
    params: ModelParams,
    prompt: np.ndarray,
    state: DecodeState,
    cfg: DecodeConfig,
    counter: Optional[OpCounter],
) -> Tuple[np.ndarray, Optional[KVCache]]:
    cache = state.cache
    if not cfg.use_cache and cache is None:
        full = forward(
            params, np.concatenate([prompt, state.window]), cfg.attention_mode, counter=counter
        )
        return full[len(prompt) :], None
    refresh = cfg.cache_refresh_interval and state.iteration % cfg.cache_refresh_interval == 0
    if cache is None or (refresh and state.iteration > 0):
        cache, logits = build_cache(
            params, prompt, state.window, cfg.attention_mode, counter=counter
        )
        return logits, cache
    logits = step_with_cache(
        params, prompt, state.window, cache, cfg.attention_mode, counter=counter
    )
    return logits, cache


def decode_step(
    params: ModelParams,
    prompt: TokensLike,
    state: DecodeState,
    cfg: DecodeConfig,
    *,
    counter: Optional[OpCounter] = None,
) -> Tuple[DecodeState, StepRecord]:
    """Run one iteration without modifying `state`.

    Args:
        params: The weights.
        prompt: The prompt tokens.
        state: The window before the iteration, with at least one open slot.
        cfg: The decode configuration.
        counter: Receives the forward pass.

    Returns:
        The window after the iteration and what it committed.
    """
    prompt_tokens = as_token_batch(prompt)[0][0]
    # Generators are copied only when this iteration draws from them
    selection_rng = state.selection_rng
    if cfg.selection_temperature > 0.0 or (
        cfg.algorithm is DecodeAlgorithm.CONFIDENT and cfg.fallback is Fallback.RANDOM
    ):
        selection_rng = copy.deepcopy(selection_rng)
    sampling_rng = state.sampling_rng
    iteration = state.iteration + 1
    logits, cache = _window_logits(params, prompt_tokens, state, cfg, counter)

    open_slots = state.open_slots
    rows = logits[open_slots].astype(np.float64)
    rows[:, params.config.mask_id] = -np.inf
    revised = revise_probs(rows, cfg.temperature, cfg.top_p, cfg.top_k)
    scored = revised if cfg.confidence_source is ConfidenceSource.POST_REVISION else None
    if scored is None:
        scored = revise_probs(rows, 1.0)
    scores = confidence(scored, cfg.confidence_measure)

    if cfg.algorithm is DecodeAlgorithm.MASKGIT:
        k = cfg.k or math.ceil(len(open_slots) / max(cfg.max_steps - state.iteration, 1))
        picked = select_maskgit(
            scores, k, selection_temperature=cfg.selection_temperature, rng=selection_rng
        )
    else:
        picked = select_confident(
            scores,
            cfg.gamma,
            cfg.fallback,
            selection_rng,
            fallback_k=cfg.fallback_k,
            selection_temperature=cfg.selection_temperature,
        )
    if cfg.temperature == 0.0:
        tokens = revised[picked].argmax(axis=-1)
    else:
        sampling_rng = copy.deepcopy(sampling_rng)
        tokens = _sample(revised[picked], sampling_rng)
    slots = open_slots[picked]

    window = state.window.copy()
    committed_at = state.committed_at.copy()
    window[slots] = tokens
    committed_at[slots] = iteration
    _logger.debug(
        "iteration %d: committed %d of %d open slots", iteration, len(slots), len(open_slots)
    )
    new_state = DecodeState(window, committed_at, iteration, selection_rng, sampling_rng, cache)
    return new_state, StepRecord(iteration, tuple(slots.tolist()), tuple(tokens.tolist()))


def _strip_trailing_pads(window: np.ndarray, pad_id: int) -> Tuple[int, Tuple[int, ...]]:
    end = len(window)
    while end and window[end - 1] == pad_id:
        end -= 1
    interior = tuple(int(slot) for slot in np.flatnonzero(window[:end] == pad_id))
    return end, interior


def _history(
    window: np.ndarray,
    committed_at: np.ndarray,
    iterations: int,
    pad_id: int,
    interior_pads: Tuple[int, ...],
    detokenize: Callable[[int], str],
) -> GenerationHistory:
    records = []
    for slot, (token, when) in enumerate(zip(window.tolist(), committed_at.tolist())):
        if when == _PRIOR:
            mark = PRIOR
        elif when == _OPEN:
            mark = MASKED
        elif token == pad_id:
            mark = PAD
        else:
            mark = when
        records.append(SlotRecord(slot, token, detokenize(token), mark))
    return GenerationHistory(
        slots=tuple(records),
        response_length=len(window),
        remaining_tokens=int((committed_at != _PRIOR).sum()),
        actual_iterations=iterations,
        interior_pads=interior_pads,
    )


def decode(  # noqa: PLR0913
    params: ModelParams,
    prompt: TokensLike,
    cfg: DecodeConfig,
    priors: Optional[StructurePrior] = None,
    cache: Optional[KVCache] = None,
    *,
    detokenize: Optional[Callable[[int], str]] = None,
    counter: Optional[OpCounter] = None,
) -> DecodeResult:
    """Decode an answer window for a prompt.

    The loop ends when no slot is masked or `max_steps` iterations ran. An exhausted budget is not
    an error: the result has status
    [`DecodeStatus.INCOMPLETE`][paradiff.decoder.DecodeStatus.INCOMPLETE] and carries the
    partial window.

    Args:
        params: The weights.
        prompt: The prompt tokens, ending with the `[BOS]` of the answer turn.
        cfg: The decode configuration.
        priors: Tokens fixed before the first iteration.
        cache: A prompt cache to start from; `cfg.use_cache` builds one in the first iteration.
        detokenize: Maps token ids to the text stored in the history, defaults to `str`.
        counter: Receives every forward pass of the decode.

    Returns:
        The decode result.

    Raises:
        SequenceLengthError: Prompt and window do not fit into `max_seq_len`.
        ConfigError: The priors do not fit into the window.
    """
    # Configure logging in case it hasn't been done yet
    configure_logging()
    prompt_tokens = as_token_batch(prompt)[0][0]
    if len(prompt_tokens) + cfg.response_length > params.config.max_seq_len:
        msg = (
            f"prompt ({len(prompt_tokens)}) plus response ({cfg.response_length}) exceed "
            f"max_seq_len={params.config.max_seq_len}"
        )
        raise SequenceLengthError(msg)
    own_counter = OpCounter()
    state = initial_state(params, cfg, priors, cache)
    steps: List[StepRecord] = []
    seconds: List[float] = []
    entries: List[int] = []
    reused: List[bool] = []
    while state.open_slots.size and state.iteration < cfg.max_steps:
        previous_cache = state.cache
        entries_before = own_counter.score_entries
        with timed(f"decode iteration {state.iteration + 1}", logger=_logger) as watch:
            state, step = decode_step(params, prompt_tokens, state, cfg, counter=own_counter)
        steps.append(step)
        seconds.append(watch.elapsed)
        entries.append(own_counter.score_entries - entries_before)
        reused.append(previous_cache is not None and state.cache is previous_cache)

    status = DecodeStatus.INCOMPLETE if state.open_slots.size else DecodeStatus.COMPLETE
    if status is DecodeStatus.INCOMPLETE:
        _logger.info(
            "decode stopped after %d iterations with %d masked slots",
            state.iteration,
            state.open_slots.size,
        )
    pad_id = params.config.pad_id
    end, interior = _strip_trailing_pads(state.window, pad_id)
    answer = tuple(state.window[:end].tolist())
    forward_passes, score_entries = own_counter.snapshot()
    if counter is not None:
        counter.add(forward_passes, score_entries)
    return DecodeResult(
        status=status,
        window=state.window,
        answer_tokens=answer,
        sequence=TokenSequence(
            np.concatenate([prompt_tokens, np.asarray(answer, dtype=np.int64)]),
            [Segment.PROMPT] * len(prompt_tokens) + [Segment.ANSWER] * len(answer),
        ),
        history=_history(
            state.window, state.committed_at, state.iteration, pad_id, interior, detokenize or str
        ),
        committed_at=state.committed_at,
        steps=tuple(steps),
        stats=DecodeStats(
            forward_passes=forward_passes,
            score_entries=score_entries,
            iteration_seconds=tuple(seconds),
            committed_tokens=sum(len(step.slots) for step in steps),
            iteration_entries=tuple(entries),
            cached_iterations=tuple(reused),
        ),
    )


def decode_autoregressive(
    params: ModelParams,
    prompt: TokensLike,
    max_new_tokens: int,
    *,
    counter: Optional[OpCounter] = None,
) -> Tuple[int, ...]:
    """Greedy left-to-right decoding under causal attention, reusing keys and values.

    Args:
        params: The weights.
        prompt: The prompt tokens, ending with the `[BOS]` of the answer turn.
        max_new_tokens: The largest number of generated tokens.
        counter: Receives every forward pass.

    Returns:
        The generated tokens up to, not including, the first `[EOS]`.
    """
    prompt_tokens = as_token_batch(prompt)[0]
    trace = forward_trace(
        params, prompt_tokens, AttentionMode.CAUSAL, counter=counter, keep_activations=False
    )
    past = trace.kv
    generated: List[int] = []
    next_token = int(trace.logits[0, -1].argmax())
    budget = min(max_new_tokens, params.config.max_seq_len - prompt_tokens.shape[1])
    while next_token != params.config.eos_id and len(generated) < budget:
        generated.append(next_token)
        if len(generated) == budget:
            break
        trace = forward_trace(
            params,
            np.array([[next_token]]),
            AttentionMode.CAUSAL,
            past=past,
            counter=counter,
            keep_activations=False,
        )
        past = [
            (np.concatenate([pk, k], axis=2), np.concatenate([pv, v], axis=2))
            for (pk, pv), (k, v) in zip(past, trace.kv)
        ]
        next_token = int(trace.logits[0, -1].argmax())
    return tuple(generated)
