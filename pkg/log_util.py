"""
Logging setup for command-line runs. Library modules only create loggers.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbosity: int = 0, log_file=None) -> list[logging.Handler]:
    """
    verbosity 0 -> INFO, 1+ -> DEBUG, negative -> WARNING.
    log_file, when given, receives the same records as stderr.
    Returns the installed handlers; pass them to release_logging when the run ends.
    """
    if verbosity < 0:
        level = logging.WARNING
    elif verbosity == 0:
        level = logging.INFO
    else:
        level = logging.DEBUG
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    return handlers


def release_logging(handlers: list[logging.Handler]) -> None:
    """ Detach and close handlers installed by configure_logging, leaving the process logging usable. """
    root = logging.getLogger()
    for handler in handlers:
        root.removeHandler(handler)
        handler.close()
