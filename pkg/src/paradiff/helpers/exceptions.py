"""Exceptions raised by the `paradiff` package."""

from typing import Sequence


class ParaDiffError(Exception):
    """Base class of every error raised on purpose by this package."""


class SequenceLengthError(ParaDiffError, ValueError):
    """A token sequence does not fit into the model's positional table."""


class TokenRangeError(ParaDiffError, ValueError):
    """A token id is outside of the vocabulary."""


class CacheMismatchError(ParaDiffError, ValueError):
    """A KV cache was used with other params, another attention mode or another prompt."""


class ScheduleRangeError(ParaDiffError, ValueError):
    """A diffusion time step is outside of (0, 1]."""


class MalformedSampleError(ParaDiffError, ValueError):
    """A sequence or corpus record violates the prompt/answer/turn structure."""


class NonFiniteError(ParaDiffError, FloatingPointError):
    """Logits or probabilities contain NaN or only -inf values."""


class ConfigError(ParaDiffError, ValueError):
    """A configuration value or file is invalid."""


class CheckpointFormatError(ParaDiffError, ValueError):
    """A checkpoint file is truncated or its header does not describe its payload."""


class HistoryFormatError(ParaDiffError, ValueError):
    """A generation-history record cannot be parsed."""


class TrainingDivergedError(ParaDiffError, RuntimeError):
    """The training loss became NaN or infinite.

    Attributes:
        step: The zero-based optimizer step at which the loss diverged.
        batch_ids: The corpus indices of the samples in the offending batch.
    """

    def __init__(self, step: int, batch_ids: Sequence[int], loss: float) -> None:
        """Create the error with its diagnostic payload.

        Args:
            step: The zero-based optimizer step at which the loss diverged.
            batch_ids: The corpus indices of the samples in the offending batch.
            loss: The non-finite loss value.
        """
        self.step = step
        self.batch_ids = tuple(batch_ids)
        self.loss = loss
        super().__init__(
            f"Non-finite loss {loss!r} at step {step} (batch ids: {list(self.batch_ids)})"
        )
