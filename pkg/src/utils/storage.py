"""Atomic artifact writes shared by every pipeline stage"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write bytes to a temporary sibling, then atomically replace the target"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    temp_file = target.with_name(f".{target.name}.{os.getpid()}.tmp")

    try:
        with open(temp_file, "wb") as f:
            f.write(payload)
        # On POSIX systems, this is atomic
        temp_file.replace(target)
    except Exception:
        temp_file.unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote {len(payload)} bytes to {target}")
    return target


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(data: Any) -> str:
    """Canonical JSON text: sorted keys, 2-space indent, trailing newline"""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path: PathLike, data: Any) -> Path:
    return atomic_write_text(path, dump_json(data))


def read_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
