"""Logging setup and the component logger adapter"""

import logging

import pytest

from config.logging_config import get_log_file_paths, setup_logging
from utils.logger import get_logger


@pytest.fixture
def log_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("LOG_TO_CONSOLE", "false")
    yield tmp_path / "logs"
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()


def test_context_tags_in_fixed_order():
    adapter = get_logger("SSOD")
    msg, _ = adapter.process("step done", {"extra": {"theta": 0.25, "iteration": 3, "run": "full-giou", "other": 1}})
    assert msg == "[SSOD] [run=full-giou] [iteration=3] [theta=0.25] step done"


def test_no_context():
    msg, _ = get_logger("Scene").process("hello", {})
    assert msg == "[Scene] hello"


def test_error_log_only_gets_errors(log_dir):
    setup_logging(log_level="DEBUG", log_dir=str(log_dir))
    logger = get_logger("Storage")
    logger.info("saved split")
    logger.error("cannot write", extra={"stage": "polish"})
    for handler in logging.getLogger().handlers:
        handler.flush()

    main_log, error_log = get_log_file_paths(str(log_dir))
    main_text = main_log.read_text(encoding="utf-8")
    error_text = error_log.read_text(encoding="utf-8")
    assert "[INFO] [Storage] saved split" in main_text
    assert "[ERROR] [Storage] [stage=polish] cannot write" in main_text
    assert "saved split" not in error_text
    assert "cannot write" in error_text


def test_repeated_setup_does_not_duplicate(log_dir):
    setup_logging(log_dir=str(log_dir))
    setup_logging(log_dir=str(log_dir))
    file_handlers = [h for h in logging.getLogger().handlers if isinstance(h, logging.FileHandler)]
    assert len(file_handlers) == 2


def test_log_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "env-logs"))
    main_log, _ = get_log_file_paths()
    assert main_log.parent == tmp_path / "env-logs"
