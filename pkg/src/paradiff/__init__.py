"""Parallel decoding for discrete diffusion language models.

Provides access to commonly imported items from the `paradiff` package.
"""

from importlib.metadata import version

from paradiff.checkpoint import load_checkpoint, save_checkpoint
from paradiff.decoder import decode, DecodeAlgorithm, DecodeConfig, StructurePrior
from paradiff.helpers import configure_logging, LoggingLevels, PACKAGE_NAME
from paradiff.model import AttentionMode, init_params, ModelConfig, ModelParams
from paradiff.tasks import gen_corpus, TaskKind, TaskSpec, Vocabulary
from paradiff.trainer import PipelineConfig, Recipe, run_pipeline, TrainConfig

# Read version from installed package.
__version__ = version(PACKAGE_NAME)

__all__ = [
    "PACKAGE_NAME",
    "AttentionMode",
    "DecodeAlgorithm",
    "DecodeConfig",
    "LoggingLevels",
    "ModelConfig",
    "ModelParams",
    "PipelineConfig",
    "Recipe",
    "StructurePrior",
    "TaskKind",
    "TaskSpec",
    "TrainConfig",
    "Vocabulary",
    "configure_logging",
    "decode",
    "gen_corpus",
    "init_params",
    "load_checkpoint",
    "run_pipeline",
    "save_checkpoint",
]
