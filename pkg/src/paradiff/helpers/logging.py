# pyright: reportUnnecessaryTypeIgnoreComment=none
"""Helpers for paradiff logging and wall-clock instrumentation."""

from __future__ import annotations

import contextlib
import importlib.metadata
import logging
import sys
import time

from enum import Enum
from pathlib import Path
from typing import Generator, List, Optional, TYPE_CHECKING, Union

import colorlog

from tzlocal import get_localzone  # pyright: ignore[reportUnknownVariableType]

if TYPE_CHECKING:
    import os

_logger_initialized = False

_FILE_FORMAT = "[%(asctime)s] [%(levelname)8s] %(message)s"
_CONSOLE_FORMAT = "%(asctime)s - %(message)s"


class LoggingLevels(Enum):
    """A class holding the valid logging levels supported."""

    DEBUG = "DEBUG"
    """An enum member representing the DEBUG logging level."""
    INFO = "INFO"
    """An enum member representing the INFO logging level."""
    WARNING = "WARNING"
    """An enum member representing the WARNING logging level."""
    ERROR = "ERROR"
    """An enum member representing the ERROR logging level."""
    CRITICAL = "CRITICAL"
    """An enum member representing the CRITICAL logging level."""
    NONE = "NONE"
    """An enum member indicating no logging messages should be captured."""


class Stopwatch:
    """Elapsed wall-clock seconds of a [`timed()`][paradiff.helpers.logging.timed] block."""

    def __init__(self) -> None:
        """Create a stopwatch that has not been started."""
        self.start = 0.0
        self.stop: Optional[float] = None
        self.laps: List[float] = []

    @property
    def elapsed(self) -> float:
        """Seconds between start and stop, or until now while the block is still running."""
        end = time.perf_counter() if self.stop is None else self.stop
        return end - self.start

    def lap(self) -> float:
        """Record and return the seconds since the previous lap (or since the start)."""
        now = time.perf_counter()
        previous = self.start + sum(self.laps)
        self.laps.append(now - previous)
        return self.laps[-1]


@contextlib.contextmanager
def timed(
    label: str, *, logger: Optional[logging.Logger] = None, level: int = logging.DEBUG
) -> Generator[Stopwatch, None, None]:
    """Measure the wall-clock duration of a block and log it when the block exits.

    Examples:
        >>> from paradiff.helpers.logging import timed
        >>> with timed("decode") as watch:
        ...     pass
        >>> watch.elapsed >= 0.0
        True

    Args:
        label: A short name for the measured block, used in the log message.
        logger: The logger to report to, defaults to the package logger.
        level: The logging level of the report.

    Yields:
        The running stopwatch; `elapsed` is frozen once the block exits.
    """
    from paradiff.helpers.constants import (  # pylint: disable=import-outside-toplevel
        PACKAGE_NAME,
    )

    watch = Stopwatch()
    watch.start = time.perf_counter()
    try:
        yield watch
    finally:
        watch.stop = time.perf_counter()
        (logger or logging.getLogger(PACKAGE_NAME)).log(
            level, "%s took %.6fs", label, watch.elapsed
        )


def _file_handler(log_filepath: Path, level: LoggingLevels) -> logging.Handler:
    log_filepath.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_filepath, mode="w", encoding="utf-8")
    formatter = logging.Formatter(_FILE_FORMAT)
    formatter.default_msec_format = "%s.%06d"  # Use 6 digits of precision for milliseconds
    handler.setLevel(getattr(logging, level.value))
    handler.setFormatter(formatter)
    return handler


def _console_handler(level: LoggingLevels, *, colored: bool) -> logging.Handler:
    if colored:
        handler: logging.Handler = colorlog.StreamHandler(stream=sys.stdout)
        formatter: logging.Formatter = colorlog.ColoredFormatter(
            "%(log_color)s" + _CONSOLE_FORMAT,
            log_colors=colorlog.default_log_colors,
        )
    else:
        handler = logging.StreamHandler(stream=sys.stdout)
        formatter = logging.Formatter(_CONSOLE_FORMAT)
    formatter.default_msec_format = "%s.%06d"
    handler.setLevel(getattr(logging, level.value))
    handler.setFormatter(formatter)
    return handler


def configure_logging(
    *,
    log_console_level: Union[str, LoggingLevels] = LoggingLevels.INFO,
    log_file_level: Union[str, LoggingLevels] = LoggingLevels.NONE,
    log_file_directory: Optional[Union[str, os.PathLike[str], Path]] = None,
    log_file_name: Optional[str] = None,
    log_colored_output: bool = False,
) -> logging.Logger:
    """Configure the logging for this package.

    !!! note
        After this function is called once, if it is called again, it will not perform any
        additional configuration. It will simply return the base logger for the package.

    Training runs produce one DEBUG record per optimizer step, so the file sink is off unless a
    level is requested explicitly (the CLI turns it on with `--log-dir`).

    Args:
        log_console_level: The logging level to set for the console. Defaults to INFO. Set to
            [`LoggingLevels.NONE`][paradiff.helpers.logging.LoggingLevels.NONE] to disable all
            console logging/printouts except for certain warnings and exceptions.
        log_file_level: The logging level to set for the file. Defaults to NONE, which disables
            logging to a file entirely.
        log_file_directory: The directory to save log files to. Defaults to "./logs" in the
            current working directory.
        log_file_name: The name of the log file to save the logs to. Defaults to a timestamped name
            with the .log extension.
        log_colored_output: Whether to use colored output from the `colorlog` package for the
            console. Defaults to False.

    Returns:
        The base logger for the package, this base logger can also be accessed using
            `logging.getLogger(paradiff.PACKAGE_NAME)`.
    """
    from paradiff.helpers.constants import (  # pylint: disable=import-outside-toplevel
        PACKAGE_NAME,
    )

    global _logger_initialized  # noqa: PLW0603

    _logger: logging.Logger = logging.getLogger(PACKAGE_NAME)
    if _logger_initialized:
        return _logger
    log_console_level = LoggingLevels(log_console_level)
    log_file_level = LoggingLevels(log_file_level)
    # The handlers filter by level, the logger itself passes everything
    _logger.setLevel(logging.DEBUG)
    _logger.addHandler(logging.NullHandler())

    if log_file_level != LoggingLevels.NONE:
        directory = Path(log_file_directory) if log_file_directory else Path("./logs")
        if not log_file_name:  # pragma: no cover
            log_file_name = (
                f"{PACKAGE_NAME}_{time.strftime('%m-%d-%Y_%H-%M-%S', time.localtime())}.log"
            )
        _logger.addHandler(_file_handler(directory / log_file_name, log_file_level))

    # Only the file sink sees these, the console handler is attached afterwards
    _logger.debug("timezone==%s", get_localzone())  # pyright: ignore[reportUnknownArgumentType,reportUnnecessaryTypeIgnoreComment]
    _logger.debug("%s==%s", PACKAGE_NAME, importlib.metadata.version(PACKAGE_NAME))

    if log_console_level != LoggingLevels.NONE:
        _logger.addHandler(_console_handler(log_console_level, colored=log_colored_output))

    _logger_initialized = True
    return _logger
