"""Unit tests for the synthetic tasks and their vocabulary."""

import dataclasses

from typing import List

import numpy as np
import pytest

from conftest import COPY_SPEC, EXTRACT_SPEC

from paradiff.diffusion_data import CorpusRecord
from paradiff.helpers.constants import BOS_ROLE, EOS_ROLE, MASK_ROLE, PAD_ROLE
from paradiff.helpers.exceptions import ConfigError, MalformedSampleError, TokenRangeError
from paradiff.tasks import (
    CorpusConfig,
    encode_prompt,
    gen_corpus,
    prompt_tokens,
    reference_arithmetic,
    reference_copy,
    reference_extract,
    TaskKind,
    TaskSpec,
    validate_corpus,
    Vocabulary,
)


def test_vocabulary(vocab: Vocabulary) -> None:
    """Special tokens come first and every task word round-trips."""
    assert vocab.words[:4] == ("[PAD]", "[MASK]", "[BOS]", "[EOS]")
    assert vocab.special_tokens == {PAD_ROLE: 0, MASK_ROLE: 1, BOS_ROLE: 2, EOS_ROLE: 3}
    text = "extract: date: | date: 0 3 / 1 2 ; id: 4 2 1 0"
    assert vocab.decode(vocab.encode(text)) == text
    assert "\\box{" in vocab
    assert "hello" not in vocab
    assert len(vocab) == len(set(vocab.words))
    ids = [vocab.special_tokens[BOS_ROLE], *vocab.encode("a b")]
    assert vocab.decode(ids, skip_special=True) == "a b"


def test_vocabulary_errors(vocab: Vocabulary) -> None:
    """Unknown words and ids are rejected, as are gaps in the special ids."""
    with pytest.raises(TokenRangeError, match="unknown word 'hello'"):
        vocab.encode("copy: hello")
    with pytest.raises(TokenRangeError, match="outside vocabulary"):
        vocab.id_to_token(len(vocab))
    with pytest.raises(ConfigError, match="special token ids"):
        Vocabulary(["a"], {PAD_ROLE: 0, MASK_ROLE: 2, BOS_ROLE: 3, EOS_ROLE: 4})


def test_custom_special_ids() -> None:
    """Special ids may be permuted; the words follow them."""
    vocab = Vocabulary.for_tasks({PAD_ROLE: 3, MASK_ROLE: 2, BOS_ROLE: 1, EOS_ROLE: 0})
    assert vocab.words[:4] == ("[EOS]", "[BOS]", "[MASK]", "[PAD]")


def test_task_spec_validation() -> None:
    """Invalid task parameters are reported together."""
    with pytest.raises(ConfigError, match="symbols must be non-empty letters"):
        TaskSpec(symbols=("A",))
    with pytest.raises(ConfigError, match="answer_length.*; operand_range"):
        TaskSpec(answer_length=(3, 2), operand_range=(5, 1))
    with pytest.raises(ConfigError, match="fields"):
        TaskSpec(fields=("date", "date"))
    with pytest.raises(ConfigError, match="held_out_fraction"):
        TaskSpec(held_out_fraction=1.0)
    with pytest.raises(ConfigError, match="corpus size"):
        CorpusConfig(size=0)


def test_reference_answers() -> None:
    """Reference functions compute the unique answer of each task."""
    assert reference_copy("copy: a b c".split()) == ["a", "b", "c"]
    assert reference_arithmetic("3 + 4 =".split()) == ["7"]
    assert reference_arithmetic("1 2 + 9 =".split()) == ["2", "1"]
    assert reference_arithmetic("1 2 + 9 =".split(), boxed=True) == (
        "1 2 + 9 = 2 1 , the answer is \\box{ 2 1 }".split()
    )
    prompt = "extract: time: date: | date: 0 3 / 1 2 ; id: 4 2 1 0 ; time: 0 9 : 4 5"
    assert reference_extract(prompt.split()) == (
        "time: 0 9 : 4 5 , date: 0 3 / 1 2".split()
    )


def test_reference_errors() -> None:
    """Prompts of the wrong shape are malformed."""
    with pytest.raises(MalformedSampleError, match="copy:"):
        reference_copy(["a", "b"])
    with pytest.raises(MalformedSampleError, match="not an addition prompt"):
        reference_arithmetic("3 4 =".split())
    with pytest.raises(MalformedSampleError, match="'\\|'"):
        reference_extract("extract: date: date: 0 1".split())
    with pytest.raises(MalformedSampleError, match="field 'time' missing"):
        reference_extract("extract: time: | date: 0 3 / 1 2".split())


def test_gen_corpus_determinism(vocab: Vocabulary, copy_corpus: List[CorpusRecord]) -> None:
    """The same spec always yields the same records; another seed does not."""
    assert gen_corpus(COPY_SPEC, 200, vocab) == copy_corpus
    assert gen_corpus(dataclasses.replace(COPY_SPEC, seed=12), 200, vocab) != copy_corpus


def test_gen_corpus_split(copy_corpus: List[CorpusRecord]) -> None:
    """The held-out split is the tail of the corpus and shares no prompt with training."""
    splits = [record.split for record in copy_corpus]
    assert splits == ["train"] * 160 + ["held_out"] * 40
    train = {record.prompt_tokens for record in copy_corpus[:160]}
    assert not any(record.prompt_tokens in train for record in copy_corpus[160:])
    with pytest.raises(ConfigError, match="at least one record"):
        gen_corpus(COPY_SPEC, 0)


def test_gen_corpus_lengths(vocab: Vocabulary, copy_corpus: List[CorpusRecord]) -> None:
    """Copy answers stay within the configured lengths and symbols."""
    lengths = {len(record.answer_tokens) for record in copy_corpus}
    assert lengths == {1, 2, 3, 4}
    symbols = set(vocab.encode(" ".join(COPY_SPEC.symbols)))
    assert all(set(record.answer_tokens) <= symbols for record in copy_corpus)


@pytest.mark.parametrize(
    "spec",
    [
        COPY_SPEC,
        EXTRACT_SPEC,
        TaskSpec(kind=TaskKind.ARITHMETIC, operand_range=(0, 99), seed=4),
        TaskSpec(kind=TaskKind.ARITHMETIC, boxed=True, seed=5),
    ],
)
def test_validate_generated_corpus(vocab: Vocabulary, spec: TaskSpec) -> None:
    """Generated corpora pass their own validation."""
    records = gen_corpus(spec, 50, vocab)
    assert validate_corpus(spec, records, vocab) == 50


def test_extract_prompt_layout(vocab: Vocabulary) -> None:
    """An extraction prompt requests every field and lists them with the distractors."""
    record = gen_corpus(EXTRACT_SPEC, 1, vocab)[0]
    words = vocab.decode(record.prompt_tokens).split()
    assert words[:4] == ["extract:", "date:", "time:", "|"]
    assert words.count(";") == 2
    answer = vocab.decode(record.answer_tokens).split()
    assert answer[0] == "date:"
    assert answer[answer.index(",") + 1] == "time:"


def test_validate_rejects_wrong_answer(vocab: Vocabulary) -> None:
    """A record whose answer differs from the reference fails validation."""
    good = CorpusRecord.single_turn(vocab.encode("copy: a b"), vocab.encode("a b"))
    bad = CorpusRecord.single_turn(vocab.encode("copy: a b"), vocab.encode("b a"))
    with pytest.raises(MalformedSampleError, match="record 1: answer"):
        validate_corpus(COPY_SPEC, [good, bad], vocab)


def test_encode_prompt(vocab: Vocabulary, copy_corpus: List[CorpusRecord]) -> None:
    """A decode prompt is the user turn closed by `[EOS]` and an opening assistant `[BOS]`."""
    bos, eos = vocab.special_tokens[BOS_ROLE], vocab.special_tokens[EOS_ROLE]
    encoded = encode_prompt(vocab, "copy: a b")
    assert encoded.tolist() == [bos, *vocab.encode("copy: a b"), eos, bos]
    record = copy_corpus[0]
    np.testing.assert_array_equal(
        prompt_tokens(record, vocab.special_tokens),
        encode_prompt(vocab, vocab.decode(record.prompt_tokens)),
    )
