"""
Structured logging for the library and the CLI.

Events are key-value pairs rendered either as console lines or as one JSON
object per line (SCN_JSON_LOGS). numpy scalars and small arrays are turned
into plain values first, so solver and ensemble events serialize cleanly.
Output goes to stderr, plus an optional rotating file (SCN_LOG_FILE).
"""

import logging
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import structlog
from structlog.types import EventDict, Processor

# Arrays longer than this are summarized instead of dumped into the log line
MAX_LOGGED_ARRAY = 16


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        if value.size > MAX_LOGGED_ARRAY:
            return {
                "shape": list(value.shape),
                "min": float(value.min()),
                "max": float(value.max()),
            }
        return value.tolist()
    return value


def coerce_numpy_values(_: logging.Logger, __: str, event_dict: EventDict) -> EventDict:
    """numpy scalars and arrays to plain values; nested dicts one level deep."""
    for key, value in list(event_dict.items()):
        if isinstance(value, dict):
            event_dict[key] = {k: _plain(v) for k, v in value.items()}
        else:
            event_dict[key] = _plain(value)
    return event_dict


def add_timestamp(_: logging.Logger, __: str, event_dict: EventDict) -> EventDict:
    event_dict["timestamp"] = datetime.now(timezone.utc).isoformat()
    return event_dict


def add_log_level(_: logging.Logger, method_name: str, event_dict: EventDict) -> EventDict:
    """Upper-case level name (INFO, WARNING, ...) under "level"."""
    event_dict["level"] = method_name.upper()
    return event_dict


class ContextLogger:
    """
    Thin wrapper over a structlog logger that remembers its bound context.

    bind/unbind return new loggers, so a module-level logger can be shared by
    CLI commands and ensemble workers without context leaking between them.
    """

    def __init__(self, logger: structlog.BoundLogger, context: Optional[Dict[str, Any]] = None):
        self._logger = logger
        self._context: Dict[str, Any] = dict(context or {})

    def bind(self, **kwargs: Any) -> "ContextLogger":
        return ContextLogger(self._logger.bind(**kwargs), {**self._context, **kwargs})

    def unbind(self, *keys: str) -> "ContextLogger":
        remaining = {k: v for k, v in self._context.items() if k not in keys}
        return ContextLogger(self._logger.unbind(*keys), remaining)

    @contextmanager
    def context(self, **kwargs: Any) -> Iterator["ContextLogger"]:
        """Bind on this logger for the duration of the block."""
        saved = self._logger, self._context
        self._logger = self._logger.bind(**kwargs)
        self._context = {**self._context, **kwargs}
        try:
            yield self
        finally:
            self._logger, self._context = saved

    def is_enabled_for(self, level: int) -> bool:
        """Lets callers skip building expensive trace payloads."""
        return logging.getLogger().isEnabledFor(level)

    def debug(self, event: str, **kwargs: Any) -> None:
        self._logger.debug(event, **kwargs)

    def info(self, event: str, **kwargs: Any) -> None:
        self._logger.info(event, **kwargs)

    def warning(self, event: str, **kwargs: Any) -> None:
        self._logger.warning(event, **kwargs)

    def error(self, event: str, **kwargs: Any) -> None:
        self._logger.error(event, **kwargs)

    def exception(self, event: str, **kwargs: Any) -> None:
        self._logger.exception(event, **kwargs)


def setup_logging(
    log_level: str = "INFO",
    log_file: Optional[Path] = None,
    json_format: bool = False,
    max_bytes: int = 10 * 1024 * 1024,
    backup_count: int = 3,
) -> None:
    """
    Configure structlog and the stdlib root logger.

    Args:
        log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL (unknown names mean INFO)
        log_file: Optional rotating log file, created with its parent directory
        json_format: One JSON object per line instead of console rendering
        max_bytes: Size at which the log file rotates
        backup_count: Rotated files kept
    """
    level = getattr(logging, log_level.upper(), logging.INFO)

    processors: List[Processor] = [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_logger_name,
        add_log_level,
        add_timestamp,
        coerce_numpy_values,
        structlog.stdlib.PositionalArgumentsFormatter(),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.UnicodeDecoder(),
    ]
    if json_format:
        processors += [
            structlog.processors.format_exc_info,
            structlog.processors.JSONRenderer(sort_keys=True),
        ]
    else:
        processors.append(structlog.dev.ConsoleRenderer(colors=False))

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.stdlib.BoundLogger,
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )

    # stderr keeps stdout free for command output
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(
            RotatingFileHandler(
                log_file, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8"
            )
        )
    for handler in handlers:
        handler.setLevel(level)

    logging.basicConfig(level=level, handlers=handlers, format="%(message)s", force=True)


def get_logger(name: str = "scn") -> ContextLogger:
    """Logger for a module; pass __name__."""
    return ContextLogger(structlog.get_logger(name))
