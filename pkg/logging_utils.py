"""Logging helpers for search runs and workers.

Logs are JSON so that batch schedulers, containers and log aggregation systems
can filter runs by event, generation or worker without parsing the progress
lines printed by the command-line driver.
"""

import json
import logging
import os
import sys
from datetime import datetime, timezone


LOG_LEVEL_ENV = "MACC_LOG_LEVEL"
_EXTRA_KEYS = ("event", "generation", "worker_tag", "method", "seed", "file_path", "s3_key")


class JsonFormatter(logging.Formatter):
    """Emit one compact JSON object per log record."""

    def format(self, record):
        payload = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key in _EXTRA_KEYS:
            value = getattr(record, key, None)
            if value is not None:
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


def level_from_env(default=logging.INFO):
    """Resolve the log level from MACC_LOG_LEVEL (name or number)."""
    value = os.getenv(LOG_LEVEL_ENV, "").strip()
    if not value:
        return default
    if value.isdigit():
        return int(value)
    level = logging.getLevelName(value.upper())
    if not isinstance(level, int):
        raise ValueError(f"{LOG_LEVEL_ENV} must be a logging level name, got {value!r}")
    return level


def configure_logging(level=None, stream=None):
    """Configure the project logger once, without changing third-party loggers."""
    logger = logging.getLogger("macc")
    if logger.handlers:
        return logger
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonFormatter())
    logger.addHandler(handler)
    logger.setLevel(level_from_env() if level is None else level)
    logger.propagate = False
    return logger
