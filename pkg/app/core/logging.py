import logging
import logging.config
from pathlib import Path
from typing import Any, Dict, Optional

from app.core.config import get_settings

# stdout carries reports and tables; log records go to stderr and the file
CONSOLE_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s - %(message)s"


def _handlers(level: str, log_file: str) -> Dict[str, Dict[str, Any]]:
    handlers = {
        "console": {
            "class": "logging.StreamHandler",
            "level": level,
            "formatter": "console",
            "stream": "ext://sys.stderr",
        }
    }
    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        handlers["file"] = {
            "class": "logging.handlers.RotatingFileHandler",
            "level": "DEBUG",
            "formatter": "file",
            "filename": str(path),
            "maxBytes": 10485760,  # 10MB
            "backupCount": 3,
        }
    return handlers


def setup_logging(level: Optional[str] = None) -> None:
    """Console plus rotating-file logging; an empty LOG_FILE disables the file handler.

    `level` overrides LOG_LEVEL for the console. The file always records DEBUG so
    per-head solver objectives of a run can be inspected afterwards.
    """
    settings = get_settings()
    level = (level or settings.LOG_LEVEL).upper()
    handlers = _handlers(level, settings.LOG_FILE)

    logging.config.dictConfig(
        {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "console": {"format": CONSOLE_FORMAT, "datefmt": "%H:%M:%S"},
                "file": {"format": FILE_FORMAT, "datefmt": "%Y-%m-%d %H:%M:%S"},
            },
            "handlers": handlers,
            "loggers": {
                name: {"level": "DEBUG", "handlers": list(handlers), "propagate": False}
                for name in ("app", "main", "__main__")
            },
            "root": {"level": "WARNING", "handlers": ["console"]},
        }
    )
