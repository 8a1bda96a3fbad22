"""Helpers used by the `paradiff` package."""

from paradiff.helpers.constants import PACKAGE_NAME
from paradiff.helpers.logging import configure_logging, LoggingLevels, timed

__all__ = [
    "PACKAGE_NAME",
    "LoggingLevels",
    "configure_logging",
    "timed",
]
