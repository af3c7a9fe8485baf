"""Environment settings (LTUNE_LOG_LEVEL, LTUNE_LOG_FILE) from the shell or a .env file."""

import os
from pathlib import Path
from typing import Optional, Union

from dotenv import load_dotenv

ROOT_DIR = Path(__file__).parent.parent
ENV_PREFIX = 'LTUNE_'


def load_env(dotenv_path: Optional[Union[str, Path]] = None) -> bool:
    """
    Read a .env file (the project root one by default) into os.environ.
    Variables already set in the shell are left alone.
    """
    path = ROOT_DIR / '.env' if dotenv_path is None else Path(dotenv_path)
    if not path.is_file():
        return False
    return load_dotenv(dotenv_path=path, override=False)


def get_env(name: str, default: Optional[str] = None) -> Optional[str]:
    """Value of `name`, with unset and blank both falling back to `default`."""
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    return value.strip()
