"""Application configuration settings."""

import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from pydantic import ValidationError
from pydantic_settings import BaseSettings

from app.core.exceptions import ConfigurationError
from app.models.run_config import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-wide settings shared by every command."""

    # Numerical Configuration
    DEFAULT_DAMPING: float = 1e-6
    PINV_CUTOFF: float = 1e-12
    SYMMETRY_TOLERANCE: float = 1e-8
    NEGATIVE_EIGEN_TOLERANCE: float = 1e-8

    # Guards
    MAX_OVERALL_DIM: int = 256
    MAX_EXHAUSTIVE_SUBSETS: int = 1_000_000

    # Accounting Configuration
    KV_ELEMENT_BYTES: int = 2  # BF16 stand-in
    ACCOUNTING_CONTEXT_LENGTH: int = 2048

    # Calibration Configuration
    CALIBRATION_WORKERS: int = 1

    # Report Configuration
    REPORT_FLOAT_FORMAT: str = ".12e"

    # Logging Configuration
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = "logs/a3_compress.log"

    class Config:
        env_file = ".env"
        case_sensitive = True


@lru_cache()
def get_settings() -> Settings:
    """Get cached application settings."""
    return Settings()


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: Dict[str, Any], assignment: str) -> None:
    """Apply one `dotted.key=value` assignment in place; values are read as JSON when they parse."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = [part for part in key.strip().split(".") if part]
    if not parts:
        raise ConfigurationError(f"override {assignment!r} has an empty key")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"override {assignment!r} descends into a scalar at {part!r}")
        node = child
    node[parts[-1]] = _parse_value(raw.strip())


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the JSON file, then command-line overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigurationError(f"cannot read config file {path}", details=str(e))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON", details=str(e))
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
    for assignment in overrides:
        apply_override(data, assignment)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        logger.error(f"Invalid run configuration: {e}")
        raise ConfigurationError("invalid run configuration", details=str(e))
    logger.debug(f"Loaded run configuration: {config.model_dump(mode='json')}")
    return config
