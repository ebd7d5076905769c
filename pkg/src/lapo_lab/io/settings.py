"""Environment-driven settings (``.env`` files are honoured)."""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

DEFAULT_OUTPUT_ROOT = "lapo_runs"
DEFAULT_LOG_LEVEL = "INFO"


def output_root() -> Path:
    return Path(os.environ.get("LAPO_LAB_DIR", DEFAULT_OUTPUT_ROOT))


def log_level() -> int:
    name = os.environ.get("LAPO_LAB_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO
