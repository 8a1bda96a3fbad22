"""Unit tests for sequence layout, the forward process and the training losses."""

import math

from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest

from paradiff.diffusion_data import (
    ar_loss,
    ARLossSpec,
    build_sequence,
    corrupt,
    CorpusRecord,
    CorruptedSample,
    diffusion_loss,
    MaskSchedule,
    pad_batch,
    pad_bounds,
    pad_expansion,
    prepare_diffusion_sample,
    read_corpus,
    Role,
    sample_t,
    Segment,
    to_ar_form,
    TokenSequence,
    Turn,
    write_corpus,
)
from paradiff.helpers.exceptions import (
    MalformedSampleError,
    NonFiniteError,
    ScheduleRangeError,
    TokenRangeError,
)

PAD, MASK, BOS, EOS = 0, 1, 2, 3


def _answer_sequence(length: int) -> TokenSequence:
    """A [BOS] prompt followed by `length` answer tokens."""
    return TokenSequence(
        np.full(length + 1, 5), [Segment.PROMPT] + [Segment.ANSWER] * length
    )


def _two_turns() -> TokenSequence:
    return build_sequence(
        [
            Turn(Role.USER, (7, 8)),
            Turn(Role.ASSISTANT, tuple(range(4, 14))),
            Turn(Role.USER, (9,)),
            Turn(Role.ASSISTANT, tuple(range(4, 14))),
        ]
    )


####################################################################################################
# Sequence layout
####################################################################################################
def test_build_sequence_layout() -> None:
    """Every turn is wrapped in [BOS] ... [EOS] and only assistant content is Answer."""
    seq = _two_turns()
    assert len(seq.turns) == 4
    assert [span.role for span in seq.turns] == [Role.USER, Role.ASSISTANT] * 2
    assert seq.tokens[:4].tolist() == [BOS, 7, 8, EOS]
    assert int(seq.answer_mask.sum()) == 2 * (10 + 1)
    assert not seq.answer_mask[seq.turns[1].start]
    with pytest.raises(ValueError, match="read-only"):
        seq.tokens[0] = 4


def test_build_sequence_errors() -> None:
    """Samples need a non-empty assistant turn."""
    with pytest.raises(MalformedSampleError, match="at least one assistant"):
        build_sequence([Turn(Role.USER, (7,))])
    with pytest.raises(MalformedSampleError, match="at least one token"):
        build_sequence([Turn(Role.USER, (7,)), Turn(Role.ASSISTANT, ())])


def test_pad_must_follow_answer() -> None:
    """A Pad label before an Answer label is malformed."""
    with pytest.raises(MalformedSampleError, match="Pad labels"):
        TokenSequence([2, 0, 5], [Segment.PROMPT, Segment.PAD, Segment.ANSWER])
    with pytest.raises(MalformedSampleError, match="equal length"):
        TokenSequence([2, 5], [Segment.PROMPT])


def test_validate_token_range() -> None:
    """Token ids outside the vocabulary are rejected."""
    seq = TokenSequence([2, 9], [Segment.PROMPT, Segment.ANSWER])
    seq.validate(10)
    with pytest.raises(TokenRangeError):
        seq.validate(9)


def test_prompt_prefix_keeps_earlier_answers() -> None:
    """The prompt of the final answer ends with the last assistant [BOS]."""
    seq = _two_turns()
    prefix = seq.prompt_prefix()
    last = seq.turns[-1]
    assert prefix.tokens.tolist() == seq.tokens[: last.start + 1].tolist()
    assert prefix.tokens[-1] == BOS
    assert not prefix.maskable.any()


####################################################################################################
# Padding
####################################################################################################
def _expected_bounds(answer_length: int) -> List[int]:
    n_min = answer_length + 1
    if n_min < 16:  # noqa: PLR2004
        return [n_min, 2 ** math.ceil(math.log2(n_min))]
    return [n_min, 16 * math.ceil(n_min / 16)]


@pytest.mark.parametrize("answer_length", range(1, 65))
def test_pad_bounds_formula(answer_length: int) -> None:
    """The window range follows the power-of-two / multiple-of-16 rule."""
    assert list(pad_bounds(answer_length)) == _expected_bounds(answer_length)


@pytest.mark.parametrize(("answer_length", "bounds"), [(3, (4, 4)), (10, (11, 16)), (20, (21, 32))])
def test_pad_bounds_examples(answer_length: int, bounds: Tuple[int, int]) -> None:
    """Hand-computed ranges."""
    assert pad_bounds(answer_length) == bounds


def test_pad_expansion_covers_range() -> None:
    """Draws stay inside the range and reach both ends."""
    rng = np.random.default_rng(0)
    draws = {pad_expansion(10, rng) for _ in range(500)}
    assert draws == set(range(11, 17))
    with pytest.raises(MalformedSampleError):
        pad_expansion(0, rng)


def test_prepare_diffusion_sample_single_turn() -> None:
    """An answer of three tokens gets exactly one pad in place of [EOS]."""
    raw = build_sequence([Turn(Role.USER, (7, 8)), Turn(Role.ASSISTANT, (4, 5, 6))])
    sample = prepare_diffusion_sample(raw, np.random.default_rng(0))
    assert sample.tokens.tolist() == [BOS, 7, 8, EOS, BOS, 4, 5, 6, PAD]
    assert sample.segments[-4:].tolist() == [Segment.ANSWER] * 3 + [Segment.PAD]
    assert EOS not in sample.tokens[raw.turns[1].start :].tolist()


def test_prepare_diffusion_sample_multi_turn() -> None:
    """User turns stay bit-identical and every assistant turn is padded independently."""
    raw = _two_turns()
    sizes = set()
    for seed in range(30):
        sample = prepare_diffusion_sample(raw, np.random.default_rng(seed))
        for before, after in zip(raw.turns, sample.turns):
            if before.role is Role.USER:
                np.testing.assert_array_equal(
                    raw.tokens[before.start : before.end], sample.tokens[after.start : after.end]
                )
        first, second = (span.end - span.start - 1 for span in sample.turns[1::2])
        assert 11 <= first <= 16
        assert 11 <= second <= 16
        sizes.add((first, second))
    assert any(first != second for first, second in sizes)


def test_to_ar_form_inverts_padding() -> None:
    """Collapsing the pads restores the autoregressive form."""
    raw = _two_turns()
    sample = prepare_diffusion_sample(raw, np.random.default_rng(4))
    assert to_ar_form(sample) == raw


def test_prepare_needs_turn_layout() -> None:
    """Sequences without turns cannot be padded."""
    with pytest.raises(MalformedSampleError, match="turn layout"):
        prepare_diffusion_sample(_answer_sequence(3), np.random.default_rng(0))


####################################################################################################
# Forward process
####################################################################################################
def test_alpha_schedule() -> None:
    """Linear schedule values and its range."""
    schedule = MaskSchedule()
    assert schedule.alpha(1.0) == 0.0
    assert schedule.alpha(0.3) == pytest.approx(0.7)
    assert schedule.alpha(1e-9) == pytest.approx(1.0)
    for t in (0.0, -0.1, 1.5):
        with pytest.raises(ScheduleRangeError):
            schedule.alpha(t)


def test_sample_t_range() -> None:
    """Training time steps lie in (epsilon, 1]."""
    rng = np.random.default_rng(1)
    values = np.array([sample_t(rng, 0.05) for _ in range(2000)])
    assert values.min() > 0.05
    assert values.max() <= 1.0


def test_corrupt_scope() -> None:
    """Prompt positions survive and t=1 absorbs every maskable position."""
    raw = build_sequence([Turn(Role.USER, (7, 8)), Turn(Role.ASSISTANT, (4, 5, 6))])
    sample = prepare_diffusion_sample(raw, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    for t in (0.2, 0.7, 1.0):
        corrupted = corrupt(sample, t, rng)
        prompt = ~sample.maskable
        np.testing.assert_array_equal(corrupted.x_t[prompt], sample.tokens[prompt])
        assert not corrupted.mask_indicator[prompt].any()
    full = corrupt(sample, 1.0, rng)
    np.testing.assert_array_equal(full.mask_indicator, sample.maskable)
    assert (full.x_t[sample.maskable] == MASK).all()


@pytest.mark.parametrize("t", [0.1, 0.3, 0.5, 0.9])
def test_mask_rate_statistics(t: float) -> None:
    """The masked fraction stays within four binomial standard deviations of t."""
    positions = 10_000
    sample = corrupt(_answer_sequence(positions), t, np.random.default_rng(42))
    rate = sample.mask_indicator.sum() / positions
    assert abs(rate - t) <= 4 * math.sqrt(t * (1 - t) / positions)


def test_corrupt_needs_maskable_positions() -> None:
    """A prompt-only sequence cannot be corrupted."""
    with pytest.raises(MalformedSampleError):
        corrupt(TokenSequence([2, 5], [0, 0]), 0.5, np.random.default_rng(0))


####################################################################################################
# Losses
####################################################################################################
def test_diffusion_loss_without_masks_is_zero() -> None:
    """Empty sums give zero loss."""
    seq = _answer_sequence(3)
    sample = CorruptedSample(seq.tokens.copy(), np.zeros(4, dtype=bool), 0.4)
    logits = np.random.default_rng(0).normal(size=(4, 8))
    assert diffusion_loss(logits, sample, seq) == 0.0


def test_diffusion_loss_single_mask_uniform() -> None:
    """One masked position under uniform logits costs (1/t) ln V."""
    seq = TokenSequence([5, 6], [Segment.PROMPT, Segment.ANSWER])
    sample = CorruptedSample(np.array([5, MASK]), np.array([False, True]), 0.5)
    expected = 2 * math.log(4)
    assert diffusion_loss(np.zeros((2, 4)), sample, seq) == pytest.approx(expected, abs=1e-12)


def test_diffusion_loss_full_mask_is_summed_cross_entropy() -> None:
    """At t=1 with everything masked the loss is plain summed cross-entropy."""
    rng = np.random.default_rng(3)
    seq = TokenSequence([2, 4, 5, 6, 7], [0, 1, 1, 1, 1])
    sample = corrupt(seq, 1.0, rng)
    logits = rng.normal(size=(5, 9))
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -sum(log_probs[n, seq.tokens[n]] for n in range(1, 5))
    assert diffusion_loss(logits, sample, seq) == pytest.approx(expected, abs=1e-6)


def test_ar_loss_values() -> None:
    """Uniform logits cost ln V per token and perfect logits cost nothing."""
    seq = TokenSequence([2, 5, 6, 3], [0, 0, 1, 1])
    assert ar_loss(np.zeros((4, 4 + 4)), seq) == pytest.approx(math.log(8))
    perfect = np.full((4, 8), -1e3)
    for n in range(1, 4):
        perfect[n - 1, seq.tokens[n]] = 0.0
    assert ar_loss(perfect, seq) == pytest.approx(0.0, abs=1e-12)


def test_ar_loss_supervises_answer_only() -> None:
    """Only the rows that predict Answer tokens receive a gradient."""
    seq = TokenSequence([2, 5, 6, 3, 2, 7, 3], [0, 0, 0, 0, 0, 1, 1])
    spec = ARLossSpec.from_sequences([seq])
    _, grad = spec.loss_and_grad(np.zeros((1, 7, 8)))
    rows = np.flatnonzero(np.abs(grad[0]).sum(axis=1))
    assert rows.tolist() == [4, 5]


def test_loss_errors() -> None:
    """Losses reject missing answers, mismatched lengths and non-finite logits."""
    prompt_only = TokenSequence([2, 5], [0, 0])
    with pytest.raises(MalformedSampleError):
        ar_loss(np.zeros((2, 8)), prompt_only)
    seq = TokenSequence([2, 5], [0, 1])
    with pytest.raises(MalformedSampleError, match="logit rows"):
        ar_loss(np.zeros((3, 8)), seq)
    logits = np.zeros((2, 8))
    logits[1, 2] = np.nan
    with pytest.raises(NonFiniteError):
        ar_loss(logits, seq)
    sample = CorruptedSample(np.array([2, MASK]), np.array([False, True]), 1.0)
    with pytest.raises(NonFiniteError):
        diffusion_loss(np.full((2, 8), np.inf), sample, seq)


def test_pad_batch() -> None:
    """Rows are right-padded and their lengths reported."""
    tokens, lengths = pad_batch([np.array([2, 5, 6]), np.array([2])], pad_id=0)
    assert tokens.tolist() == [[2, 5, 6], [2, 0, 0]]
    assert lengths.tolist() == [3, 1]


####################################################################################################
# Corpus files
####################################################################################################
def test_corpus_round_trip(tmp_path: Path) -> None:
    """Records survive a write and read, split filtering included."""
    records = [
        CorpusRecord.single_turn((7, 8), (4,)),
        CorpusRecord((7, 9, 8), (4, 5, 6), ((1, 1), (3, 3)), split="held_out"),
    ]
    assert write_corpus(tmp_path / "corpus.jsonl", records) == 2
    assert read_corpus(tmp_path / "corpus.jsonl") == records
    assert read_corpus(tmp_path / "corpus.jsonl", split="held_out") == records[1:]
    assert records[1].final_answer() == (5, 6)
    assert [turn.role for turn in records[1].turns()] == [Role.USER, Role.ASSISTANT] * 2


def test_corpus_errors(tmp_path: Path) -> None:
    """Inconsistent boundaries and broken lines are reported."""
    with pytest.raises(MalformedSampleError, match="increase"):
        CorpusRecord((7,), (4, 5), ((1, 2), (1, 2)))
    with pytest.raises(MalformedSampleError, match="end at"):
        CorpusRecord((7, 8), (4,), ((1, 1),))
    path = tmp_path / "corpus.jsonl"
    good = '{"prompt_tokens": [7], "answer_tokens": [4], "turn_boundaries": [[1, 1]]}'
    path.write_text(good + "\n{\n")
    with pytest.raises(MalformedSampleError, match=":2:"):
        read_corpus(path)
