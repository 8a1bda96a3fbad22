"""Pytest configuration."""

import dataclasses
import logging
import sys

from io import StringIO
from pathlib import Path
from typing import Dict, Generator, List

import pytest

from paradiff import configure_logging, LoggingLevels
from paradiff.decoder import DecodeAlgorithm, DecodeConfig
from paradiff.diffusion_data import CorpusRecord
from paradiff.model import init_params, ModelConfig, ModelParams
from paradiff.tasks import gen_corpus, TaskKind, TaskSpec, Vocabulary
from paradiff.trainer import Phase, PipelineConfig, Recipe, run_pipeline, TrainConfig

PROJECT_ROOT_DIR = Path(__file__).parent.parent


####################################################################################################
# Configure the logging for the package that will run during unit tests
class _DynamicStreamHandler(logging.StreamHandler):  # pyright: ignore[reportMissingTypeArgument]
    def emit(self, record: logging.LogRecord) -> None:
        self.stream = sys.stdout
        super().emit(record)


_logger = configure_logging(
    log_console_level=LoggingLevels.NONE,
    log_file_level=LoggingLevels.DEBUG,
    log_file_directory=Path(__file__).parent / "logs",
    log_file_name=f"unit_test_py{sys.version_info.major}{sys.version_info.minor}.log",
)
_unit_test_console_handler = _DynamicStreamHandler(stream=sys.stdout)
_unit_test_console_handler.setLevel(logging.INFO)
_unit_test_console_formatter = logging.Formatter("%(asctime)s - %(message)s")
_unit_test_console_formatter.default_msec_format = (
    "%s.%06d"  # Use 6 digits of precision for milliseconds
)
_unit_test_console_handler.setFormatter(_unit_test_console_formatter)
_logger.addHandler(_unit_test_console_handler)
####################################################################################################

COPY_SPEC = TaskSpec(
    kind=TaskKind.COPY, symbols=("a", "b", "c", "d"), answer_length=(1, 4), seed=11
)
EXTRACT_SPEC = TaskSpec(kind=TaskKind.KEY_VALUE_EXTRACT, distractors=1, seed=12)
LONG_PROMPT_SPEC = TaskSpec(
    kind=TaskKind.KEY_VALUE_EXTRACT, fields=("time",), distractors=12, seed=13
)


@pytest.fixture
def capture_stdout() -> Generator[StringIO, None, None]:
    """Fixture to capture the standard output."""
    old_stdout = sys.stdout
    sys.stdout = mystdout = StringIO()
    yield mystdout
    sys.stdout = old_stdout


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    """The vocabulary of the synthetic tasks."""
    return Vocabulary.for_tasks()


@pytest.fixture
def tiny_config() -> ModelConfig:
    """A two-layer model small enough for finite differences."""
    return ModelConfig(vocab_size=8, n_layers=2, n_heads=2, d_model=8, d_ff=16, max_seq_len=16)


@pytest.fixture
def tiny_params(tiny_config: ModelConfig) -> ModelParams:
    """Randomly initialised weights of the tiny model."""
    return init_params(tiny_config, seed=0)


@pytest.fixture(scope="session")
def task_config(vocab: Vocabulary) -> ModelConfig:
    """A model sized for the synthetic task vocabulary."""
    return ModelConfig(
        vocab_size=len(vocab),
        n_layers=2,
        n_heads=2,
        d_model=16,
        d_ff=32,
        max_seq_len=64,
        special_tokens=vocab.special_tokens,
    )


@pytest.fixture(scope="session")
def task_params(task_config: ModelConfig) -> ModelParams:
    """Untrained weights of the task-sized model."""
    return init_params(task_config, seed=3)


@pytest.fixture(scope="session")
def copy_corpus(vocab: Vocabulary) -> List[CorpusRecord]:
    """A small copy corpus with a held-out split."""
    return gen_corpus(COPY_SPEC, 200, vocab)


####################################################################################################
# Trained models for the end-to-end tests (marked slow)
####################################################################################################
@pytest.fixture(scope="session")
def e2e_corpus(vocab: Vocabulary) -> List[CorpusRecord]:
    """Copy plus key/value extraction records."""
    return gen_corpus(COPY_SPEC, 600, vocab) + gen_corpus(EXTRACT_SPEC, 600, vocab)


@pytest.fixture(scope="session")
def e2e_config(vocab: Vocabulary) -> ModelConfig:
    """The architecture of the end-to-end models."""
    return ModelConfig(
        vocab_size=len(vocab),
        n_layers=2,
        n_heads=4,
        d_model=64,
        d_ff=128,
        max_seq_len=64,
        special_tokens=vocab.special_tokens,
    )


@pytest.fixture(scope="session")
def e2e_pipeline() -> PipelineConfig:
    """Phase configurations of the end-to-end models."""
    return PipelineConfig(
        ar=TrainConfig(phase=Phase.AR, learning_rate=3e-3, batch_size=32, epochs=25, seed=0),
        diffusion=TrainConfig(
            phase=Phase.DIFFUSION,
            learning_rate=1e-3,
            batch_size=32,
            epochs=25,
            max_grad_norm=0.1,
            seed=1,
        ),
    )


@pytest.fixture(scope="session")
def trained_models(
    e2e_corpus: List[CorpusRecord], e2e_config: ModelConfig, e2e_pipeline: PipelineConfig
) -> Dict[str, ModelParams]:
    """A hybrid and a pure-diffusion model trained with the same number of updates."""
    train = [record for record in e2e_corpus if record.split == "train"]
    params = init_params(e2e_config, seed=0)
    return {
        recipe.value: run_pipeline(recipe, params, train, e2e_pipeline).params
        for recipe in (Recipe.HYBRID, Recipe.PURE_DIFFUSION)
    }


@pytest.fixture(scope="session")
def long_prompt_corpus(vocab: Vocabulary) -> List[CorpusRecord]:
    """Extraction records whose prompts are more than ten times longer than their answers."""
    return gen_corpus(LONG_PROMPT_SPEC, 400, vocab)


@pytest.fixture(scope="session")
def long_prompt_model(
    long_prompt_corpus: List[CorpusRecord], e2e_config: ModelConfig, e2e_pipeline: PipelineConfig
) -> ModelParams:
    """A hybrid model trained on the long-prompt records."""
    train = [record for record in long_prompt_corpus if record.split == "train"]
    config = dataclasses.replace(e2e_config, max_seq_len=112)
    cfgs = PipelineConfig(
        ar=dataclasses.replace(e2e_pipeline.ar, epochs=15),
        diffusion=dataclasses.replace(e2e_pipeline.diffusion, epochs=15),
    )
    return run_pipeline(Recipe.HYBRID, init_params(config, seed=0), train, cfgs).params


@pytest.fixture(scope="session")
def held_out(e2e_corpus: List[CorpusRecord]) -> List[CorpusRecord]:
    """The held-out records of the end-to-end corpus."""
    return [record for record in e2e_corpus if record.split == "held_out"]


@pytest.fixture
def k1_decode() -> DecodeConfig:
    """One slot per iteration, greedy tokens."""
    return DecodeConfig(algorithm=DecodeAlgorithm.MASKGIT, k=1, max_steps=32)

