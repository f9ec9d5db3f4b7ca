"""Centralized logging configuration for the polishing simulator"""

import logging
import logging.handlers
import os
from pathlib import Path
from typing import Optional, Tuple

MAIN_LOG_NAME = "polish_sim.log"
ERROR_LOG_NAME = "polish_sim_errors.log"
MAX_LOG_BYTES = 50 * 1024 * 1024
LOG_BACKUPS = 10

# [YYYY-MM-DD HH:MM:SS] [LEVEL] [COMPONENT] [CONTEXT] message
LOG_FORMAT = "[%(asctime)s] [%(levelname)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def _rotating(path: Path, level: int, formatter: logging.Formatter) -> logging.Handler:
    handler = logging.handlers.RotatingFileHandler(
        path, maxBytes=MAX_LOG_BYTES, backupCount=LOG_BACKUPS, encoding="utf-8"
    )
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def setup_logging(log_level: Optional[str] = None, log_dir: Optional[str] = None):
    """
    Route all records to a rotating main log and errors also to an error log

    Calling it again replaces the handlers of the previous call, so one
    process can run several commands.

    Args:
        log_level: DEBUG, INFO, WARNING or ERROR. Defaults to LOG_LEVEL or INFO
        log_dir: Directory for log files. Defaults to LOG_DIR or "logs"
    """
    level_name = (log_level or os.getenv("LOG_LEVEL", "INFO")).upper()
    numeric_level = getattr(logging, level_name, logging.INFO)
    main_log, error_log = get_log_file_paths(log_dir)
    main_log.parent.mkdir(parents=True, exist_ok=True)

    root = logging.getLogger()
    root.setLevel(numeric_level)
    for old in list(root.handlers):
        root.removeHandler(old)
        old.close()

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    root.addHandler(_rotating(main_log, logging.DEBUG, formatter))
    root.addHandler(_rotating(error_log, logging.ERROR, formatter))

    # LOG_TO_CONSOLE defaults to true for the CLI
    if os.getenv("LOG_TO_CONSOLE", "true").lower() == "true":
        console = logging.StreamHandler()
        console.setLevel(numeric_level)
        console.setFormatter(formatter)
        root.addHandler(console)


def get_log_file_paths(log_dir: Optional[str] = None) -> Tuple[Path, Path]:
    """
    Get paths to main and error log files

    Returns:
        Tuple of (main_log_path, error_log_path)
    """
    log_path = Path(log_dir or os.getenv("LOG_DIR", "logs"))
    return log_path / MAIN_LOG_NAME, log_path / ERROR_LOG_NAME
