"""
Atomic file writes. Everything the tools produce goes through here so a
crashed run never leaves a half-written weight file or CSV behind.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Iterable, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(filepath: PathLike, payload: bytes) -> Path:
    """Write bytes to a temp file next to the target, then rename over it."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    temp_path = filepath.with_name(filepath.name + '.tmp')
    try:
        with open(temp_path, 'wb') as f:
            f.write(payload)
        os.replace(temp_path, filepath)
    except OSError:
        if temp_path.exists():
            try:
                temp_path.unlink()
            except OSError:
                pass
        raise
    return filepath


def atomic_write_text(filepath: PathLike, text: str) -> Path:
    return atomic_write_bytes(filepath, text.encode('utf-8'))


def dumps_stable(data: Any) -> str:
    """JSON with sorted keys and a trailing newline; byte-stable across runs."""
    return json.dumps(data, indent=2, sort_keys=True, default=str) + '\n'


def safe_json_save(filepath: PathLike, data: Any) -> Path:
    path = atomic_write_text(filepath, dumps_stable(data))
    logger.debug(f"[SAVED] {path}")
    return path


def write_lines(filepath: PathLike, lines: Iterable[str]) -> Path:
    """Newline-delimited UTF-8 text, one entry per line."""
    return atomic_write_text(filepath, ''.join(f"{line}\n" for line in lines))


def read_lines(filepath: PathLike) -> list:
    """Read a newline-delimited file, dropping only the final empty line."""
    with open(filepath, 'r', encoding='utf-8') as f:
        text = f.read()
    lines = text.split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    return [line.rstrip('\r') for line in lines]
