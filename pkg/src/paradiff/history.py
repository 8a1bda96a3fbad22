"""Generation histories: the iteration at which every answer slot was committed.

A history file holds one JSON record per answer slot,

    {"slot": 3, "token_id": 17, "token_text": "date", "iteration": 2}

where `iteration` is a 1-based iteration index, `"prior"` for slots fixed before decoding,
`"pad"` for slots that decoded to `[PAD]` and `"masked"` for slots an incomplete decode left open.
A final summary record carries `response_length`, `remaining_tokens`, `actual_iterations` and the
slots of interior pads.
"""

from __future__ import annotations

import dataclasses
import json
import re

from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from colorlog.escape_codes import escape_codes

from paradiff.helpers.exceptions import HistoryFormatError

PRIOR = "prior"
"""Iteration marker of a slot fixed by a structure prior."""
PAD = "pad"
"""Iteration marker of a slot that decoded to `[PAD]`."""
MASKED = "masked"
"""Iteration marker of a slot left open by an incomplete decode."""

_MARKERS = (PRIOR, PAD, MASKED)
_ANSI = re.compile(r"\x1b\[[0-9;]*m")

Iteration = Union[int, str]


@dataclasses.dataclass(frozen=True)
class SlotRecord:
    """The final content of one answer slot and when it was committed."""

    slot: int
    token_id: int
    token_text: str
    iteration: Iteration

    @property
    def is_prior(self) -> bool:
        """True for slots fixed before decoding."""
        return self.iteration == PRIOR


@dataclasses.dataclass(frozen=True)
class GenerationHistory:
    """Per-slot commit record of one decode."""

    slots: Tuple[SlotRecord, ...]
    response_length: int
    remaining_tokens: int
    """Slots not covered by priors."""
    actual_iterations: int
    interior_pads: Tuple[int, ...] = ()
    """Pad slots followed by a non-pad slot, a sign of a confused model."""

    def __post_init__(self) -> None:
        """Check the accounting of the record set.

        Raises:
            HistoryFormatError: Slots are missing or repeated, an iteration is out of range, or the
                counts contradict the slots.
        """
        if [record.slot for record in self.slots] != list(range(self.response_length)):
            msg = f"expected one record per slot 0..{self.response_length - 1}"
            raise HistoryFormatError(msg)
        priors = sum(record.is_prior for record in self.slots)
        if self.remaining_tokens != self.response_length - priors:
            msg = (
                f"remaining_tokens={self.remaining_tokens} but {self.response_length} slots "
                f"hold {priors} priors"
            )
            raise HistoryFormatError(msg)
        for record in self.slots:
            if isinstance(record.iteration, bool) or not (
                record.iteration in _MARKERS
                or (
                    isinstance(record.iteration, int)
                    and 1 <= record.iteration <= self.actual_iterations
                )
            ):
                msg = f"slot {record.slot}: invalid iteration {record.iteration!r}"
                raise HistoryFormatError(msg)

    @property
    def iterations(self) -> List[int]:
        """The sorted distinct iteration indices that committed a token."""
        return sorted({r.iteration for r in self.slots if isinstance(r.iteration, int)})

    def to_records(self) -> List[Dict[str, Any]]:
        """Return the slot records followed by the summary record."""
        records: List[Dict[str, Any]] = [dataclasses.asdict(record) for record in self.slots]
        records.append(
            {
                "response_length": self.response_length,
                "remaining_tokens": self.remaining_tokens,
                "actual_iterations": self.actual_iterations,
                "interior_pads": list(self.interior_pads),
            }
        )
        return records

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]]) -> GenerationHistory:
        """Parse records created by [`to_records()`][paradiff.history.GenerationHistory.to_records].

        Raises:
            HistoryFormatError: A record is malformed or the summary record is missing.
        """
        slots: List[SlotRecord] = []
        summary: Optional[Mapping[str, Any]] = None
        for record in records:
            try:
                if "slot" in record:
                    slots.append(
                        SlotRecord(
                            slot=int(record["slot"]),
                            token_id=int(record["token_id"]),
                            token_text=str(record["token_text"]),
                            iteration=record["iteration"],
                        )
                    )
                elif "response_length" in record:
                    if summary is not None:
                        msg = "more than one summary record"
                        raise HistoryFormatError(msg)
                    summary = record
                else:
                    msg = f"unknown record {dict(record)!r}"
                    raise HistoryFormatError(msg)
            except (KeyError, TypeError, ValueError) as error:
                if isinstance(error, HistoryFormatError):
                    raise
                msg = f"malformed history record {dict(record)!r}: {error!r}"
                raise HistoryFormatError(msg) from error
        if summary is None:
            msg = "history has no summary record"
            raise HistoryFormatError(msg)
        try:
            return cls(
                slots=tuple(sorted(slots, key=lambda r: r.slot)),
                response_length=int(summary["response_length"]),
                remaining_tokens=int(summary["remaining_tokens"]),
                actual_iterations=int(summary["actual_iterations"]),
                interior_pads=tuple(int(s) for s in summary.get("interior_pads", ())),
            )
        except (KeyError, TypeError, ValueError) as error:
            if isinstance(error, HistoryFormatError):
                raise
            msg = f"malformed summary record {dict(summary)!r}"
            raise HistoryFormatError(msg) from error


def write_history(path: Union[str, Path], history: GenerationHistory) -> Path:
    """Write a history as JSON lines; equal histories produce byte-identical files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as file:
        for record in history.to_records():
            file.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def read_history(path: Union[str, Path]) -> GenerationHistory:
    """Read a history file.

    Raises:
        HistoryFormatError: A line is not JSON or the records are inconsistent.
    """
    records: List[Mapping[str, Any]] = []
    with Path(path).open(encoding="utf-8") as file:
        for number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as error:
                msg = f"{path}:{number}: {error}"
                raise HistoryFormatError(msg) from error
    return GenerationHistory.from_records(records)


####################################################################################################
# Terminal rendering
####################################################################################################
def _gradient_code(fraction: float) -> int:
    # 11 steps through the 6x6x6 colour cube: blue -> magenta -> red
    level = round(fraction * 10)
    red, blue = (level, 5) if level <= 5 else (5, 10 - level)  # noqa: PLR2004
    return 16 + 36 * red + blue


def iteration_colors(iterations: Sequence[int]) -> Dict[int, str]:
    """Map every distinct iteration to a foreground escape code, earliest blue and latest red.

    Iterations are ranked, so a history with `n` distinct iterations uses `min(n, 11)` colors.
    """
    ranked = sorted(set(iterations))
    span = max(len(ranked) - 1, 1)
    return {
        iteration: escape_codes[f"fg_{_gradient_code(rank / span)}"]
        for rank, iteration in enumerate(ranked)
    }


def render_history(history: GenerationHistory, *, colored: bool = True, width: int = 100) -> str:
    """Render a history as a token row above an iteration row.

    Prior slots show `-` in the iteration row and slots left masked show `?`. Pad slots are left
    out. Columns wrap into several
    row pairs, separated by a blank line, when they exceed `width` characters.

    Args:
        history: The history to render.
        colored: Color every token by the rank of its iteration.
        width: The maximum line width before wrapping.

    Returns:
        The rendering, without a trailing newline.
    """
    colors = iteration_colors(history.iterations) if colored else {}
    reset = escape_codes["reset"] if colored else ""
    blocks: List[Tuple[List[str], List[str]]] = [([], [])]
    used = 0
    for record in history.slots:
        if record.iteration == PAD:
            continue
        mark = {PRIOR: "-", MASKED: "?"}.get(str(record.iteration), str(record.iteration))
        column = max(len(record.token_text), len(mark))
        if used and used + column + 1 > width:
            blocks.append(([], []))
            used = 0
        color = colors.get(record.iteration, "") if isinstance(record.iteration, int) else ""
        text = record.token_text.ljust(column)
        blocks[-1][0].append(f"{color}{text}{reset}" if color else text)
        blocks[-1][1].append(mark.ljust(column))
        used += column + 1
    return "\n\n".join(
        " ".join(tokens).rstrip() + "\n" + " ".join(marks).rstrip() for tokens, marks in blocks
    )


def parse_rendering(text: str) -> List[Tuple[str, Optional[int]]]:
    """Recover `(token_text, iteration)` pairs from a rendering, None for prior slots.

    Raises:
        HistoryFormatError: The text is not a rendering.
    """
    plain = _ANSI.sub("", text)
    pairs: List[Tuple[str, Optional[int]]] = []
    for block in plain.split("\n\n"):
        lines = block.split("\n")
        if len(lines) != 2:  # noqa: PLR2004
            msg = "a rendering consists of token/iteration row pairs"
            raise HistoryFormatError(msg)
        tokens, marks = lines[0].split(), lines[1].split()
        if len(tokens) != len(marks):
            msg = f"{len(tokens)} tokens but {len(marks)} iteration marks"
            raise HistoryFormatError(msg)
        for token, mark in zip(tokens, marks):
            if mark in {"-", "?"}:
                pairs.append((token, None))
            elif mark.isdigit():
                pairs.append((token, int(mark)))
            else:
                msg = f"invalid iteration mark {mark!r}"
                raise HistoryFormatError(msg)
    return pairs
