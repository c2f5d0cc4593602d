"""Shared logging configuration for the affect pipeline"""

import logging
import os
import sys
from typing import Optional

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# librosa pulls in numba, which logs every compilation step at DEBUG
NOISY_LOGGERS = ("numba", "fsspec", "urllib3")


def setup_logging(level: Optional[str] = None, format: Optional[str] = None) -> int:
    """
    Configure the root logger on stderr and return the level in effect.

    Args:
        level: Logging level name; AFFECT_LOG_LEVEL or INFO when omitted.
            Unknown names fall back to INFO.
        format: Custom log format string
    """
    name = (level or os.environ.get("AFFECT_LOG_LEVEL") or "INFO").upper()
    resolved = logging.getLevelName(name)
    if not isinstance(resolved, int):
        resolved = logging.INFO

    logging.basicConfig(
        level=resolved,
        format=format or DEFAULT_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )
    for noisy in NOISY_LOGGERS:
        logging.getLogger(noisy).setLevel(max(resolved, logging.WARNING))
    return resolved
