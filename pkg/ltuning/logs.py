"""
Logging setup: stderr stream handler plus an optional rotating log file.
"""

import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional, Union

from .env import get_env

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
MAX_LOG_BYTES = 5 * 1024 * 1024  # 5 MB
LOG_BACKUPS = 5


def setup_logging(level: Optional[str] = None, log_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    """
    Configure the root logger once per process.

    Level falls back to LTUNE_LOG_LEVEL, then INFO. The log file falls back
    to LTUNE_LOG_FILE; with neither set only stderr is used.
    """
    level_name = (level or get_env('LTUNE_LOG_LEVEL') or 'INFO').upper()
    log_file = log_file or get_env('LTUNE_LOG_FILE')
    formatter = logging.Formatter(LOG_FORMAT)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    handlers = [console_handler]

    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            path,
            maxBytes=MAX_LOG_BYTES,
            backupCount=LOG_BACKUPS,
            encoding='utf-8',
        )
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)

    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), handlers=handlers, force=True)
    return logging.getLogger('ltuning')
