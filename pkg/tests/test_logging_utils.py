import io
import json
import logging

import pytest

from logging_utils import JsonFormatter, level_from_env


def test_json_lines_carry_event_fields():
    stream = io.StringIO()
    handler = logging.StreamHandler(stream)
    handler.setFormatter(JsonFormatter())
    logger = logging.getLogger("macc.test")
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    logger.propagate = False
    try:
        logger.info("Generation 3 done", extra={"event": "generation_finished", "generation": 3})
    finally:
        logger.removeHandler(handler)
    payload = json.loads(stream.getvalue())
    assert payload["message"] == "Generation 3 done"
    assert payload["event"] == "generation_finished"
    assert payload["generation"] == 3
    assert payload["level"] == "INFO"


def test_level_from_env(monkeypatch):
    monkeypatch.setenv("MACC_LOG_LEVEL", "debug")
    assert level_from_env() == logging.DEBUG
    monkeypatch.setenv("MACC_LOG_LEVEL", "15")
    assert level_from_env() == 15
    monkeypatch.delenv("MACC_LOG_LEVEL")
    assert level_from_env(logging.WARNING) == logging.WARNING
    monkeypatch.setenv("MACC_LOG_LEVEL", "chatty")
    with pytest.raises(ValueError):
        level_from_env()
