"""Training samples, the absorbing forward process and the two training losses.

A [`TokenSequence`][paradiff.diffusion_data.TokenSequence] exists in two forms:

- autoregressive form: every turn is `[BOS] content [EOS]`, the assistant's content and closing
  `[EOS]` are labelled [`Segment.ANSWER`][paradiff.diffusion_data.Segment.ANSWER];
- diffusion form: the assistant's `[EOS]` is replaced by a random number of `[PAD]` tokens so that
  the answer occupies an `n`-slot window, see
  [`pad_expansion()`][paradiff.diffusion_data.pad_expansion].
"""

from __future__ import annotations

import dataclasses
import json
import logging

from enum import Enum, IntEnum
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from paradiff.helpers.constants import (
    BOS_ROLE,
    DEFAULT_SPECIAL_TOKENS,
    DEFAULT_T_EPSILON,
    EOS_ROLE,
    MASK_ROLE,
    PAD_ROLE,
)
from paradiff.helpers.exceptions import (
    MalformedSampleError,
    NonFiniteError,
    ScheduleRangeError,
    TokenRangeError,
)

_logger = logging.getLogger(__name__)


class Segment(IntEnum):
    """Label of a single token of a [`TokenSequence`][paradiff.diffusion_data.TokenSequence]."""

    PROMPT = 0
    """Context tokens, never masked and never supervised."""
    ANSWER = 1
    """Assistant tokens, masked by the forward process and supervised by both losses."""
    PAD = 2
    """Padding that fills the assistant's answer window in diffusion form."""


class Role(Enum):
    """Speaker of a turn."""

    USER = "user"
    ASSISTANT = "assistant"


@dataclasses.dataclass(frozen=True)
class Turn:
    """Content tokens of one turn, without any special tokens."""

    role: Role
    tokens: Tuple[int, ...]


@dataclasses.dataclass(frozen=True)
class TurnSpan:
    """Half-open position range `[start, end)` of a turn, special tokens included."""

    role: Role
    start: int
    end: int


class TokenSequence:
    """Token ids with a segment label per token and the turn layout.

    Instances are immutable, their arrays are read-only views.
    """

    __slots__ = ("_segments", "_tokens", "turns")

    def __init__(
        self,
        tokens: Union[Sequence[int], np.ndarray],
        segments: Union[Sequence[int], np.ndarray],
        turns: Iterable[TurnSpan] = (),
    ) -> None:
        """Create a sequence and check its structure.

        Args:
            tokens: The token ids.
            segments: One [`Segment`][paradiff.diffusion_data.Segment] per token.
            turns: The turn layout, empty for sequences that are a single unlabelled span.

        Raises:
            MalformedSampleError: The lengths disagree, or a Pad label precedes an Answer label
                inside a turn.
        """
        self._tokens = np.array(tokens, dtype=np.int64)
        self._segments = np.array(segments, dtype=np.int8)
        self._tokens.setflags(write=False)
        self._segments.setflags(write=False)
        self.turns: Tuple[TurnSpan, ...] = tuple(turns)
        if self._tokens.ndim != 1 or self._tokens.shape != self._segments.shape:
            msg = (
                f"tokens and segments must be 1-D and of equal length, "
                f"got {self._tokens.shape} and {self._segments.shape}"
            )
            raise MalformedSampleError(msg)
        for span in self.turns or (TurnSpan(Role.ASSISTANT, 0, len(self)),):
            labels = self._segments[span.start : span.end]
            pads = np.flatnonzero(labels == Segment.PAD)
            answers = np.flatnonzero(labels == Segment.ANSWER)
            if pads.size and answers.size and answers[-1] > pads[0]:
                msg = f"Pad labels must follow the last answer token of the turn at {span}"
                raise MalformedSampleError(msg)

    def __len__(self) -> int:
        """Return the number of tokens."""
        return int(self._tokens.shape[0])

    def __eq__(self, other: object) -> bool:
        """Compare tokens, segments and turn layout."""
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            np.array_equal(self._tokens, other._tokens)
            and np.array_equal(self._segments, other._segments)
            and self.turns == other.turns
        )

    def __hash__(self) -> int:
        """Hash the token bytes."""
        return hash((self._tokens.tobytes(), self._segments.tobytes()))

    def __repr__(self) -> str:
        """Return a short representation."""
        return f"TokenSequence(tokens={self._tokens.tolist()}, turns={len(self.turns)})"

    @property
    def tokens(self) -> np.ndarray:
        """The token ids (read-only)."""
        return self._tokens

    @property
    def segments(self) -> np.ndarray:
        """The segment label of every token (read-only)."""
        return self._segments

    @property
    def answer_mask(self) -> np.ndarray:
        """Boolean mask of the Answer positions."""
        return self._segments == Segment.ANSWER

    @property
    def maskable(self) -> np.ndarray:
        """Boolean mask of the positions the forward process may absorb (Answer or Pad)."""
        return self._segments != Segment.PROMPT

    def validate(self, vocab_size: int) -> None:
        """Check that every token id is inside the vocabulary.

        Args:
            vocab_size: The vocabulary size of the model.

        Raises:
            TokenRangeError: A token id is negative or not smaller than `vocab_size`.
        """
        if len(self) and (self._tokens.min() < 0 or self._tokens.max() >= vocab_size):
            msg = f"token ids must be in [0, {vocab_size}), got {self._tokens.tolist()}"
            raise TokenRangeError(msg)

    def prompt_prefix(self) -> TokenSequence:
        """Return the context of the final answer, as the prompt of a decode.

        This is everything up to and including the `[BOS]` of the last assistant turn, earlier
        answers included. Without a turn layout it is everything before the first maskable
        position.
        """
        assistant = [span for span in self.turns if span.role is Role.ASSISTANT]
        if assistant:
            end = assistant[-1].start + 1
        else:
            positions = np.flatnonzero(self.maskable)
            end = int(positions[0]) if positions.size else len(self)
        return TokenSequence(self._tokens[:end], np.zeros(end, dtype=np.int8))

    def with_tokens(self, tokens: Union[Sequence[int], np.ndarray]) -> TokenSequence:
        """Return a copy with other token ids but the same labels and turn layout."""
        return TokenSequence(tokens, self._segments, self.turns)


def _special(special_tokens: Optional[Mapping[str, int]], role: str) -> int:
    return int((special_tokens or DEFAULT_SPECIAL_TOKENS)[role])


def build_sequence(
    turns: Iterable[Turn], special_tokens: Optional[Mapping[str, int]] = None
) -> TokenSequence:
    """Build the autoregressive form of a conversation.

    Examples:
        >>> seq = build_sequence([Turn(Role.USER, (7, 8)), Turn(Role.ASSISTANT, (9,))])
        >>> seq.tokens.tolist()
        [2, 7, 8, 3, 2, 9, 3]
        >>> [Segment(s).name for s in seq.segments][-3:]
        ['PROMPT', 'ANSWER', 'ANSWER']

    Args:
        turns: The conversation, content tokens only.
        special_tokens: Role to id map of the special tokens, defaults to the package defaults.

    Returns:
        The sequence, every turn opened by `[BOS]` and closed by `[EOS]`.

    Raises:
        MalformedSampleError: There is no assistant turn, or an assistant turn is empty.
    """
    bos = _special(special_tokens, BOS_ROLE)
    eos = _special(special_tokens, EOS_ROLE)
    tokens: List[int] = []
    segments: List[int] = []
    spans: List[TurnSpan] = []
    for turn in turns:
        start = len(tokens)
        if turn.role is Role.ASSISTANT:
            if not turn.tokens:
                msg = "assistant turns must have at least one token"
                raise MalformedSampleError(msg)
            label = Segment.ANSWER
        else:
            label = Segment.PROMPT
        tokens += [bos, *turn.tokens, eos]
        segments += [Segment.PROMPT, *([label] * len(turn.tokens)), label]
        spans.append(TurnSpan(turn.role, start, len(tokens)))
    if not any(span.role is Role.ASSISTANT for span in spans):
        msg = "a sample needs at least one assistant turn"
        raise MalformedSampleError(msg)
    return TokenSequence(tokens, segments, spans)


def pad_bounds(answer_length: int) -> Tuple[int, int]:
    """Return the inclusive range of answer-window sizes for an answer of the given length.

    The window holds at least the answer and one pad. Below 16 slots the upper bound is the next
    power of two, from 16 on it is the next multiple of 16.

    Examples:
        >>> pad_bounds(3), pad_bounds(10), pad_bounds(20)
        ((4, 4), (11, 16), (21, 32))

    Args:
        answer_length: The number of answer tokens, at least 1.

    Returns:
        The pair `(n_min, n_max)`.

    Raises:
        MalformedSampleError: The answer is empty.
    """
    if answer_length < 1:
        msg = f"answer length must be at least 1, got {answer_length}"
        raise MalformedSampleError(msg)
    n_min = answer_length + 1
    if n_min < 16:  # noqa: PLR2004
        n_max = 1 << (n_min - 1).bit_length()
    else:
        n_max = 16 * -(-n_min // 16)
    return n_min, n_max


def pad_expansion(answer_length: int, rng: np.random.Generator) -> int:
    """Draw the answer-window size `n` uniformly.

    The range is given by [`pad_bounds()`][paradiff.diffusion_data.pad_bounds].

    Args:
        answer_length: The number of answer tokens, at least 1.
        rng: The random generator.

    Returns:
        The window size; the answer is followed by `n - answer_length` pads.
    """
    n_min, n_max = pad_bounds(answer_length)
    return int(rng.integers(n_min, n_max + 1))


def prepare_diffusion_sample(
    raw: TokenSequence,
    rng: np.random.Generator,
    special_tokens: Optional[Mapping[str, int]] = None,
) -> TokenSequence:
    """Convert the autoregressive form into the diffusion form.

    Every assistant turn loses its `[EOS]` and is padded so that its answer occupies `n` slots,
    with `n` drawn independently per turn. User turns are copied unchanged.

    Args:
        raw: A sequence in autoregressive form with its turn layout.
        rng: The random generator.
        special_tokens: Role to id map of the special tokens.

    Returns:
        The sequence in diffusion form.

    Raises:
        MalformedSampleError: The sequence has no turn layout, or an assistant turn does not end
            with `[EOS]`.
    """
    if not raw.turns:
        msg = "prepare_diffusion_sample needs the turn layout of the sample"
        raise MalformedSampleError(msg)
    eos = _special(special_tokens, EOS_ROLE)
    pad = _special(special_tokens, PAD_ROLE)
    tokens: List[int] = []
    segments: List[int] = []
    spans: List[TurnSpan] = []
    for span in raw.turns:
        start = len(tokens)
        turn_tokens = raw.tokens[span.start : span.end].tolist()
        turn_segments = raw.segments[span.start : span.end].tolist()
        if span.role is Role.ASSISTANT:
            if len(turn_tokens) < 3 or turn_tokens[-1] != eos:  # noqa: PLR2004
                msg = f"assistant turn at {span} must be [BOS] answer [EOS]"
                raise MalformedSampleError(msg)
            answer = turn_tokens[1:-1]
            n = pad_expansion(len(answer), rng)
            tokens += [turn_tokens[0], *answer, *([pad] * (n - len(answer)))]
            segments += [
                Segment.PROMPT,
                *([Segment.ANSWER] * len(answer)),
                *([Segment.PAD] * (n - len(answer))),
            ]
        else:
            tokens += turn_tokens
            segments += turn_segments
        spans.append(TurnSpan(span.role, start, len(tokens)))
    return TokenSequence(tokens, segments, spans)


def to_ar_form(
    sequence: TokenSequence, special_tokens: Optional[Mapping[str, int]] = None
) -> TokenSequence:
    """Collapse the Pad run of every assistant turn back into a single `[EOS]`.

    Args:
        sequence: A sequence in diffusion form with its turn layout.
        special_tokens: Role to id map of the special tokens.

    Returns:
        The sequence in autoregressive form.
    """
    eos = _special(special_tokens, EOS_ROLE)
    tokens: List[int] = []
    segments: List[int] = []
    spans: List[TurnSpan] = []
    for span in sequence.turns:
        start = len(tokens)
        turn_tokens = sequence.tokens[span.start : span.end].tolist()
        turn_segments = sequence.segments[span.start : span.end].tolist()
        if span.role is Role.ASSISTANT and Segment.PAD in turn_segments:
            keep = turn_segments.index(Segment.PAD)
            tokens += [*turn_tokens[:keep], eos]
            segments += [*turn_segments[:keep], Segment.ANSWER]
        else:
            tokens += turn_tokens
            segments += turn_segments
        spans.append(TurnSpan(span.role, start, len(tokens)))
    return TokenSequence(tokens, segments, spans)


####################################################################################################
# Forward process
####################################################################################################
class ScheduleKind(Enum):
    """Shape of the keep-probability schedule."""

    LINEAR = "linear"
    """`alpha(t) = 1 - t`."""


@dataclasses.dataclass(frozen=True)
class MaskSchedule:
    """Maps a time step `t` in (0, 1] to the probability `alpha(t)` that a token stays unmasked."""

    kind: ScheduleKind = ScheduleKind.LINEAR

    def alpha(self, t: float) -> float:
        """Return the keep probability at time `t`.

        Raises:
            ScheduleRangeError: `t` is outside (0, 1].
        """
        return alpha(self, t)


def alpha(schedule: MaskSchedule, t: float) -> float:
    """Return the probability that a token is kept at time `t`.

    Examples:
        >>> round(alpha(MaskSchedule(), 0.3), 6)
        0.7

    Args:
        schedule: The mask schedule.
        t: The time step, `0 < t <= 1`.

    Returns:
        `alpha(t)`, between 0 and 1.

    Raises:
        ScheduleRangeError: `t` is outside (0, 1].
    """
    if not 0.0 < t <= 1.0:
        msg = f"t must be in (0, 1], got {t}"
        raise ScheduleRangeError(msg)
    if schedule.kind is ScheduleKind.LINEAR:
        return 1.0 - t
    raise NotImplementedError(schedule.kind)  # pragma: no cover


def sample_t(rng: np.random.Generator, epsilon: float = DEFAULT_T_EPSILON) -> float:
    """Draw a training time step uniformly from (epsilon, 1]."""
    return float(1.0 - rng.random() * (1.0 - epsilon))


@dataclasses.dataclass(frozen=True, eq=False)
class CorruptedSample:
    """The output of the forward process for one sequence."""

    x_t: np.ndarray
    """Token ids with the absorbed positions replaced by `[MASK]`."""
    mask_indicator: np.ndarray
    """True where the token was absorbed."""
    t: float
    """The time step the sample was corrupted at."""


def corrupt(
    x0: TokenSequence,
    t: float,
    rng: np.random.Generator,
    *,
    schedule: MaskSchedule = MaskSchedule(),  # noqa: B008
    mask_id: int = DEFAULT_SPECIAL_TOKENS[MASK_ROLE],
) -> CorruptedSample:
    """Absorb every Answer or Pad position independently with probability `1 - alpha(t)`.

    Args:
        x0: The clean sequence, with at least one Answer or Pad position.
        t: The time step, `0 < t <= 1`.
        rng: The random generator.
        schedule: The mask schedule.
        mask_id: The id of the `[MASK]` token.

    Returns:
        The corrupted sample; Prompt positions are never absorbed.

    Raises:
        MalformedSampleError: The sequence has nothing to absorb.
    """
    keep = alpha(schedule, t)
    maskable = x0.maskable
    if not maskable.any():
        msg = "corrupt needs at least one Answer or Pad position"
        raise MalformedSampleError(msg)
    mask_indicator = maskable & (rng.random(len(x0)) >= keep)
    x_t = np.where(mask_indicator, mask_id, x0.tokens)
    return CorruptedSample(x_t=x_t, mask_indicator=mask_indicator, t=float(t))


####################################################################################################
# Losses
####################################################################################################
def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_finite(logits: np.ndarray) -> None:
    if not np.isfinite(logits).all():
        msg = "logits contain NaN or infinite values"
        raise NonFiniteError(msg)


def _cross_entropy_with_grad(
    logits: np.ndarray, targets: np.ndarray, weights: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Return `sum(weights * CE)` and its gradient with respect to the logits."""
    log_probs = _log_softmax(logits)
    picked = np.take_along_axis(log_probs, targets[..., np.newaxis], axis=-1)[..., 0]
    loss = float(-(weights * picked).sum())
    grad = np.exp(log_probs)
    np.put_along_axis(
        grad,
        targets[..., np.newaxis],
        np.take_along_axis(grad, targets[..., np.newaxis], axis=-1) - 1.0,
        axis=-1,
    )
    grad *= weights[..., np.newaxis]
    return loss, grad.astype(logits.dtype, copy=False)


@dataclasses.dataclass(frozen=True, eq=False)
class DiffusionLossSpec:
    """Reweighted masked cross-entropy over a batch of corrupted sequences.

    Each sequence contributes `(1/t) * sum of CE over its masked positions`; the batch loss is the
    mean over sequences.
    """

    targets: np.ndarray
    """Clean token ids, shape (B, T)."""
    mask: np.ndarray
    """Absorbed positions, shape (B, T)."""
    t: np.ndarray
    """Time step per sequence, shape (B,)."""

    @classmethod
    def from_samples(
        cls, samples: Sequence[CorruptedSample], x0: Sequence[TokenSequence]
    ) -> DiffusionLossSpec:
        """Collate corrupted samples and their clean sequences, right-padded to a common length."""
        width = max(len(seq) for seq in x0)
        targets = np.zeros((len(x0), width), dtype=np.int64)
        mask = np.zeros((len(x0), width), dtype=bool)
        for row, (sample, seq) in enumerate(zip(samples, x0)):
            targets[row, : len(seq)] = seq.tokens
            mask[row, : len(seq)] = sample.mask_indicator
        return cls(targets, mask, np.array([s.t for s in samples], dtype=np.float64))

    def loss_and_grad(self, logits: np.ndarray) -> Tuple[float, np.ndarray]:
        """Return the batch loss and its gradient with respect to `logits` of shape (B, T, V)."""
        _check_finite(logits)
        weights = self.mask * (1.0 / self.t)[:, np.newaxis] / len(self.t)
        return _cross_entropy_with_grad(logits, self.targets, weights)


@dataclasses.dataclass(frozen=True, eq=False)
class ARLossSpec:
    """Next-token cross-entropy over the Answer positions of a batch.

    Position `n` is predicted from the logits at `n - 1`; each sequence contributes the mean over
    its Answer positions and the batch loss is the mean over sequences.
    """

    targets: np.ndarray
    """Token ids, shape (B, T)."""
    answer_mask: np.ndarray
    """Supervised positions, shape (B, T)."""

    def __post_init__(self) -> None:
        """Reject sequences without a supervised position."""
        supervised = self.answer_mask[:, 1:].sum(axis=1)
        if (supervised == 0).any():
            msg = "ar_loss needs at least one Answer token after the first position"
            raise MalformedSampleError(msg)

    @classmethod
    def from_sequences(cls, x0: Sequence[TokenSequence]) -> ARLossSpec:
        """Collate sequences in autoregressive form, right-padded to a common length."""
        width = max(len(seq) for seq in x0)
        targets = np.zeros((len(x0), width), dtype=np.int64)
        answer = np.zeros((len(x0), width), dtype=bool)
        for row, seq in enumerate(x0):
            targets[row, : len(seq)] = seq.tokens
            answer[row, : len(seq)] = seq.answer_mask
        return cls(targets, answer)

    def loss_and_grad(self, logits: np.ndarray) -> Tuple[float, np.ndarray]:
        """Return the batch loss and its gradient with respect to `logits` of shape (B, T, V)."""
        _check_finite(logits)
        supervised = self.answer_mask[:, 1:]
        counts = supervised.sum(axis=1)
        weights = supervised / counts[:, np.newaxis] / len(counts)
        loss, shifted_grad = _cross_entropy_with_grad(
            logits[:, :-1], self.targets[:, 1:], weights
        )
        grad = np.zeros_like(logits)
        grad[:, :-1] = shifted_grad
        return loss, grad


LossSpec = Union[ARLossSpec, DiffusionLossSpec]
"""Any loss [`backward()`][paradiff.model.backward] can differentiate."""


def diffusion_loss(logits: np.ndarray, sample: CorruptedSample, x0: TokenSequence) -> float:
    """Return the reweighted masked cross-entropy of one sequence.

    Examples:
        >>> seq = TokenSequence([5, 6], [Segment.PROMPT, Segment.ANSWER])
        >>> sample = CorruptedSample(np.array([5, 1]), np.array([False, True]), 0.5)
        >>> round(diffusion_loss(np.zeros((2, 4)), sample, seq), 4)
        2.7726

    Args:
        logits: The model output, shape (T, V).
        sample: The corrupted sample the logits were computed from.
        x0: The clean sequence.

    Returns:
        `(1/t) * sum of -log p(x0_n)` over the masked positions, 0 when nothing is masked.

    Raises:
        MalformedSampleError: The logits and the sequence have different lengths.
        NonFiniteError: The logits are not finite.
    """
    if logits.shape[0] != len(x0):
        msg = f"{logits.shape[0]} logit rows for a sequence of {len(x0)} tokens"
        raise MalformedSampleError(msg)
    spec = DiffusionLossSpec.from_samples([sample], [x0])
    return spec.loss_and_grad(logits[np.newaxis])[0]


def ar_loss(logits: np.ndarray, x0: TokenSequence) -> float:
    """Return the mean next-token cross-entropy over the Answer positions of one sequence.

    Args:
        logits: The model output under causal attention, shape (T, V).
        x0: The sequence in autoregressive form.

    Returns:
        The mean of `-log softmax(logits[n-1])[x0[n]]` over the Answer positions `n`.

    Raises:
        MalformedSampleError: The sequence has no Answer token, or the lengths differ.
        NonFiniteError: The logits are not finite.
    """
    if logits.shape[0] != len(x0):
        msg = f"{logits.shape[0]} logit rows for a sequence of {len(x0)} tokens"
        raise MalformedSampleError(msg)
    return ARLossSpec.from_sequences([x0]).loss_and_grad(logits[np.newaxis])[0]


def pad_batch(rows: Sequence[np.ndarray], pad_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad token rows into a (B, T) array.

    Args:
        rows: The token rows.
        pad_id: The filler id, its value never reaches a valid position.

    Returns:
        The padded tokens and the length of every row.
    """
    lengths = np.array([len(row) for row in rows], dtype=np.int64)
    batch = np.full((len(rows), int(lengths.max())), pad_id, dtype=np.int64)
    for index, row in enumerate(rows):
        batch[index, : len(row)] = row
    return batch, lengths


####################################################################################################
# Corpus files
####################################################################################################
@dataclasses.dataclass(frozen=True)
class CorpusRecord:
    """One line of a corpus file: content tokens of a (possibly multi-turn) conversation.

    Turn `i` consists of the user tokens `prompt_tokens[p_(i-1):p_i]` followed by the assistant
    tokens `answer_tokens[a_(i-1):a_i]`, where `(p_i, a_i) = turn_boundaries[i]`.
    """

    prompt_tokens: Tuple[int, ...]
    answer_tokens: Tuple[int, ...]
    turn_boundaries: Tuple[Tuple[int, int], ...]
    split: str = "train"

    def __post_init__(self) -> None:
        """Check that the boundaries are increasing and cover both token lists."""
        previous = (0, 0)
        for p_end, a_end in self.turn_boundaries:
            if p_end < previous[0] or a_end <= previous[1]:
                msg = f"turn boundaries must increase, got {list(self.turn_boundaries)}"
                raise MalformedSampleError(msg)
            previous = (p_end, a_end)
        if previous != (len(self.prompt_tokens), len(self.answer_tokens)):
            msg = (
                f"turn boundaries end at {previous}, token lists have lengths "
                f"{(len(self.prompt_tokens), len(self.answer_tokens))}"
            )
            raise MalformedSampleError(msg)

    @classmethod
    def single_turn(
        cls, prompt: Sequence[int], answer: Sequence[int], split: str = "train"
    ) -> CorpusRecord:
        """Create a one-turn record."""
        return cls(tuple(prompt), tuple(answer), ((len(prompt), len(answer)),), split)

    def turns(self) -> List[Turn]:
        """Return the conversation as alternating user and assistant turns."""
        turns: List[Turn] = []
        p_start = a_start = 0
        for p_end, a_end in self.turn_boundaries:
            turns.append(Turn(Role.USER, self.prompt_tokens[p_start:p_end]))
            turns.append(Turn(Role.ASSISTANT, self.answer_tokens[a_start:a_end]))
            p_start, a_start = p_end, a_end
        return turns

    def final_answer(self) -> Tuple[int, ...]:
        """Return the content tokens of the last assistant turn."""
        start = self.turn_boundaries[-2][1] if len(self.turn_boundaries) > 1 else 0
        return self.answer_tokens[start:]

    def to_sequence(self, special_tokens: Optional[Mapping[str, int]] = None) -> TokenSequence:
        """Build the autoregressive form of the record."""
        return build_sequence(self.turns(), special_tokens)

    def to_json(self) -> Dict[str, Any]:
        """Return the record as a JSON-compatible dictionary."""
        return {
            "prompt_tokens": list(self.prompt_tokens),
            "answer_tokens": list(self.answer_tokens),
            "turn_boundaries": [list(pair) for pair in self.turn_boundaries],
            "split": self.split,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> CorpusRecord:
        """Parse a dictionary created by `to_json()`.

        Raises:
            MalformedSampleError: Fields are missing or of the wrong kind.
        """
        try:
            return cls(
                prompt_tokens=tuple(int(t) for t in data["prompt_tokens"]),
                answer_tokens=tuple(int(t) for t in data["answer_tokens"]),
                turn_boundaries=tuple(
                    (int(p), int(a)) for p, a in data["turn_boundaries"]
                ),
                split=str(data.get("split", "train")),
            )
        except (KeyError, TypeError, ValueError) as error:
            if isinstance(error, MalformedSampleError):
                raise
            msg = f"malformed corpus record: {error!r}"
            raise MalformedSampleError(msg) from error


def write_corpus(path: Union[str, Path], records: Iterable[CorpusRecord]) -> int:
    """Write records as JSON lines.

    Returns:
        The number of records written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as file:
        for record in records:
            file.write(json.dumps(record.to_json(), separators=(",", ":")) + "\n")
            count += 1
    _logger.debug("wrote %d corpus records to %s", count, path)
    return count


def iter_corpus(path: Union[str, Path]) -> Iterator[CorpusRecord]:
    """Yield the records of a corpus file.

    Raises:
        MalformedSampleError: A line is not a valid record; the message names the line.
    """
    with Path(path).open(encoding="utf-8") as file:
        for number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                yield CorpusRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, MalformedSampleError) as error:
                msg = f"{path}:{number}: {error}"
                raise MalformedSampleError(msg) from error


def read_corpus(path: Union[str, Path], split: Optional[str] = None) -> List[CorpusRecord]:
    """Read a corpus file, optionally keeping only one split."""
    return [r for r in iter_corpus(path) if split is None or r.split == split]
