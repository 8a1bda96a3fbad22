"""Synthetic verifiable tasks and their vocabulary.

Every task has a reference function computing the unique correct answer from the prompt, so a
corpus can check itself and decoded answers can be scored by exact match.

- Copy: `copy: a b c` is answered by `a b c`.
- KeyValueExtract: `extract: date: time: | id: 4 2 ; date: ...` is answered by
  `date: 0 3 / 1 2 , time: 0 9 : 4 5`.
- Arithmetic: `3 + 4 =` is answered by `7`.

A boxed arithmetic answer writes the sum out first, `3 + 4 = 7 , the answer is \\box{ 7 }`.
"""

from __future__ import annotations

import dataclasses
import logging
import string

from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from paradiff.diffusion_data import CorpusRecord
from paradiff.helpers.constants import (
    BOS_ROLE,
    DEFAULT_SPECIAL_TOKENS,
    EOS_ROLE,
    MASK_ROLE,
    PAD_ROLE,
)
from paradiff.helpers.exceptions import ConfigError, MalformedSampleError, TokenRangeError

_logger = logging.getLogger(__name__)

SPECIAL_TEXT = {PAD_ROLE: "[PAD]", MASK_ROLE: "[MASK]", BOS_ROLE: "[BOS]", EOS_ROLE: "[EOS]"}
LETTERS = tuple(string.ascii_lowercase)
DIGITS = tuple(string.digits)
EXTRACT_FIELDS = ("date", "time")
DISTRACTOR_FIELDS = ("id", "room", "code", "zone", "seat", "gate")
BOX_OPEN = "\\box{"
BOX_CLOSE = "}"
_PUNCTUATION = ("copy:", "extract:", "|", ";", "/", ":", ",", "+", "=", "the", "answer", "is")


class Vocabulary:
    """Whitespace tokenizer over a fixed word list, the special tokens first.

    Examples:
        >>> vocab = Vocabulary.for_tasks()
        >>> vocab.decode(vocab.encode("copy: a b"))
        'copy: a b'
    """

    def __init__(
        self, words: Iterable[str], special_tokens: Optional[Mapping[str, int]] = None
    ) -> None:
        """Create a vocabulary.

        Args:
            words: The ordinary words, duplicates are ignored.
            special_tokens: Role to id map of the special tokens, ids 0..3 by default.

        Raises:
            ConfigError: The special ids are not 0..len(special_tokens)-1.
        """
        self.special_tokens: Dict[str, int] = dict(special_tokens or DEFAULT_SPECIAL_TOKENS)
        if sorted(self.special_tokens.values()) != list(range(len(self.special_tokens))):
            msg = f"special token ids must be 0..{len(self.special_tokens) - 1}"
            raise ConfigError(msg)
        itos = [""] * len(self.special_tokens)
        for role, token_id in self.special_tokens.items():
            itos[token_id] = SPECIAL_TEXT.get(role, f"[{role.upper()}]")
        for word in words:
            if word not in itos:
                itos.append(word)
        self._itos: Tuple[str, ...] = tuple(itos)
        self._stoi: Dict[str, int] = {word: i for i, word in enumerate(itos)}

    @classmethod
    def for_tasks(cls, special_tokens: Optional[Mapping[str, int]] = None) -> Vocabulary:
        """Return the vocabulary covering every task of this module."""
        fields = tuple(f"{name}:" for name in EXTRACT_FIELDS + DISTRACTOR_FIELDS)
        words = _PUNCTUATION + fields + (BOX_OPEN, BOX_CLOSE) + DIGITS + LETTERS
        return cls(words, special_tokens)

    def __len__(self) -> int:
        """The vocabulary size."""
        return len(self._itos)

    def __contains__(self, word: object) -> bool:
        """True for known words."""
        return word in self._stoi

    @property
    def words(self) -> Tuple[str, ...]:
        """All words in id order."""
        return self._itos

    def encode(self, text: str) -> List[int]:
        """Tokenize whitespace-separated words.

        Raises:
            TokenRangeError: A word is not in the vocabulary.
        """
        try:
            return [self._stoi[word] for word in text.split()]
        except KeyError as error:
            msg = f"unknown word {error.args[0]!r}"
            raise TokenRangeError(msg) from error

    def id_to_token(self, token_id: int) -> str:
        """Return the text of a token id.

        Raises:
            TokenRangeError: The id is outside the vocabulary.
        """
        if not 0 <= token_id < len(self._itos):
            msg = f"token id {token_id} outside vocabulary of {len(self._itos)}"
            raise TokenRangeError(msg)
        return self._itos[token_id]

    def decode(self, token_ids: Iterable[int], *, skip_special: bool = False) -> str:
        """Join the words of token ids with single spaces."""
        specials = set(self.special_tokens.values())
        return " ".join(
            self.id_to_token(int(i)) for i in token_ids if not (skip_special and int(i) in specials)
        )


class TaskKind(Enum):
    """The synthetic tasks."""

    COPY = "copy"
    KEY_VALUE_EXTRACT = "key_value_extract"
    ARITHMETIC = "arithmetic"


@dataclasses.dataclass(frozen=True)
class TaskSpec:  # pylint: disable=too-many-instance-attributes
    """Parameters of a synthetic task."""

    kind: TaskKind = TaskKind.COPY
    symbols: Tuple[str, ...] = LETTERS[:8]
    """Words a copy answer is drawn from."""
    answer_length: Tuple[int, int] = (2, 6)
    """Inclusive range of copy answer lengths."""
    operand_range: Tuple[int, int] = (0, 9)
    """Inclusive range of arithmetic operands."""
    fields: Tuple[str, ...] = EXTRACT_FIELDS
    """Fields an extraction answer reports, in answer order."""
    distractors: int = 2
    """Extra fields in an extraction prompt."""
    boxed: bool = False
    """Write arithmetic answers as `a + b = c , the answer is \\box{ c }`."""
    held_out_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the ranges.

        Raises:
            ConfigError: A value is outside its range.
        """
        low, high = self.answer_length
        first, last = self.operand_range
        checks = {
            "symbols must be non-empty letters": bool(self.symbols)
            and set(self.symbols) <= set(LETTERS),
            "answer_length must satisfy 1 <= min <= max": 1 <= low <= high,
            "operand_range must satisfy 0 <= min <= max": 0 <= first <= last,
            f"fields must be a non-empty subset of {EXTRACT_FIELDS}": bool(self.fields)
            and set(self.fields) <= set(EXTRACT_FIELDS)
            and len(set(self.fields)) == len(self.fields),
            "distractors must be >= 0": self.distractors >= 0,
            "held_out_fraction must be in [0, 1)": 0.0 <= self.held_out_fraction < 1.0,
        }
        failed = [message for message, ok in checks.items() if not ok]
        if failed:
            msg = "; ".join(failed)
            raise ConfigError(msg)


####################################################################################################
# Reference functions
####################################################################################################
def _digits(value: int) -> List[str]:
    return list(str(value))


def reference_copy(prompt: Sequence[str]) -> List[str]:
    """Return the words after `copy:`."""
    if not prompt or prompt[0] != "copy:":
        msg = "a copy prompt starts with 'copy:'"
        raise MalformedSampleError(msg)
    return list(prompt[1:])


def reference_arithmetic(prompt: Sequence[str], *, boxed: bool = False) -> List[str]:
    """Return the sum of a `a + b =` prompt, digits as separate words."""
    try:
        plus, equals = prompt.index("+"), prompt.index("=")
        left = int("".join(prompt[:plus]))
        right = int("".join(prompt[plus + 1 : equals]))
    except ValueError as error:
        msg = f"not an addition prompt: {' '.join(prompt)!r}"
        raise MalformedSampleError(msg) from error
    total = _digits(left + right)
    if not boxed:
        return total
    return [*prompt[:equals], "=", *total, ",", "the", "answer", "is", BOX_OPEN, *total, BOX_CLOSE]


def reference_extract(prompt: Sequence[str]) -> List[str]:
    """Return the requested fields of an extraction prompt, in request order."""
    try:
        bar = list(prompt).index("|")
    except ValueError as error:
        msg = "an extraction prompt separates the request from the record with '|'"
        raise MalformedSampleError(msg) from error
    requested = [word.rstrip(":") for word in prompt[1:bar]]
    values: Dict[str, List[str]] = {}
    key: Optional[str] = None
    for word in prompt[bar + 1 :]:
        if word == ";":
            key = None
        elif key is None:
            key = word.rstrip(":")
            values[key] = []
        else:
            values[key].append(word)
    answer: List[str] = []
    for position, name in enumerate(requested):
        if name not in values:
            msg = f"field {name!r} missing from the record"
            raise MalformedSampleError(msg)
        if position:
            answer.append(",")
        answer += [f"{name}:", *values[name]]
    return answer


def reference_answer(spec: TaskSpec, prompt: Sequence[str]) -> List[str]:
    """Return the unique correct answer of a prompt under a task."""
    if spec.kind is TaskKind.COPY:
        return reference_copy(prompt)
    if spec.kind is TaskKind.ARITHMETIC:
        return reference_arithmetic(prompt, boxed=spec.boxed)
    return reference_extract(prompt)


####################################################################################################
# Generation
####################################################################################################
def _field_value(name: str, rng: np.random.Generator) -> List[str]:
    if name == "date":
        return [*f"{rng.integers(1, 13):02d}", "/", *f"{rng.integers(1, 29):02d}"]
    if name == "time":
        return [*f"{rng.integers(0, 24):02d}", ":", *f"{rng.integers(0, 60):02d}"]
    return [str(d) for d in rng.integers(0, 10, size=4)]


def generate_prompt(spec: TaskSpec, rng: np.random.Generator) -> List[str]:
    """Draw the words of one prompt."""
    if spec.kind is TaskKind.COPY:
        length = int(rng.integers(spec.answer_length[0], spec.answer_length[1] + 1))
        return ["copy:", *(spec.symbols[i] for i in rng.integers(0, len(spec.symbols), length))]
    if spec.kind is TaskKind.ARITHMETIC:
        left, right = rng.integers(spec.operand_range[0], spec.operand_range[1] + 1, size=2)
        return [*_digits(int(left)), "+", *_digits(int(right)), "="]
    names = list(spec.fields) + [
        DISTRACTOR_FIELDS[i] for i in rng.integers(0, len(DISTRACTOR_FIELDS), spec.distractors)
    ]
    record: List[str] = []
    for position in rng.permutation(len(names)).tolist():
        if record:
            record.append(";")
        record += [f"{names[position]}:", *_field_value(names[position], rng)]
    return ["extract:", *(f"{name}:" for name in spec.fields), "|", *record]


def gen_corpus(
    spec: TaskSpec, n: int, vocab: Optional[Vocabulary] = None
) -> List[CorpusRecord]:
    """Generate a single-turn corpus.

    The last `round(n * held_out_fraction)` records form the `held_out` split. Held-out prompts
    are redrawn (a bounded number of times) when they also occur in the training split.

    Args:
        spec: The task.
        n: The number of records, at least 1.
        vocab: The vocabulary, [`Vocabulary.for_tasks()`][paradiff.tasks.Vocabulary.for_tasks]
            by default.

    Returns:
        The records; the same spec and `n` always give the same records.

    Raises:
        ConfigError: `n` is below 1.
    """
    if n < 1:
        msg = f"a corpus needs at least one record, got n={n}"
        raise ConfigError(msg)
    vocab = vocab or Vocabulary.for_tasks()
    rng = np.random.default_rng(spec.seed)
    held_out = round(n * spec.held_out_fraction)
    seen = set()
    records: List[CorpusRecord] = []
    for index in range(n):
        split = "held_out" if index >= n - held_out else "train"
        prompt = generate_prompt(spec, rng)
        for _ in range(100):
            if split == "train" or tuple(prompt) not in seen:
                break
            prompt = generate_prompt(spec, rng)
        if split == "train":
            seen.add(tuple(prompt))
        answer = reference_answer(spec, prompt)
        records.append(
            CorpusRecord.single_turn(
                vocab.encode(" ".join(prompt)), vocab.encode(" ".join(answer)), split
            )
        )
    _logger.debug("generated %d %s records (%d held out)", n, spec.kind.value, held_out)
    return records


def validate_corpus(
    spec: TaskSpec, records: Iterable[CorpusRecord], vocab: Optional[Vocabulary] = None
) -> int:
    """Check every record's final answer against the reference function.

    Returns:
        The number of checked records.

    Raises:
        MalformedSampleError: A record's answer differs from the reference answer.
    """
    vocab = vocab or Vocabulary.for_tasks()
    count = 0
    for count, record in enumerate(records, start=1):
        start = record.turn_boundaries[-2][0] if len(record.turn_boundaries) > 1 else 0
        prompt = vocab.decode(record.prompt_tokens[start:]).split()
        expected = reference_answer(spec, prompt)
        actual = vocab.decode(record.final_answer()).split()
        if actual != expected:
            msg = f"record {count - 1}: answer {actual} differs from reference {expected}"
            raise MalformedSampleError(msg)
    return count


def prompt_tokens(record: CorpusRecord, special_tokens: Mapping[str, int]) -> np.ndarray:
    """Return the decode prompt of a record: everything up to the last assistant `[BOS]`."""
    return record.to_sequence(special_tokens).prompt_prefix().tokens


def encode_prompt(vocab: Vocabulary, text: str) -> np.ndarray:
    """Encode a user message as a decode prompt, `[BOS] words [EOS] [BOS]`."""
    special = vocab.special_tokens
    return np.asarray(
        [special[BOS_ROLE], *vocab.encode(text), special[EOS_ROLE], special[BOS_ROLE]],
        dtype=np.int64,
    )


@dataclasses.dataclass(frozen=True)
class CorpusConfig:
    """The `[corpus]` table."""

    size: int = 500
    """Records generated per task."""

    def __post_init__(self) -> None:
        """Validate the size.

        Raises:
            ConfigError: The size is below 1.
        """
        if self.size < 1:
            msg = f"corpus size must be >= 1, got {self.size}"
            raise ConfigError(msg)
