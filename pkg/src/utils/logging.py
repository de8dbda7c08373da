# src/utils/logging.py
import logging
import sys
from typing import Optional

from src.config.settings import settings


def setup_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    """Set up a logger with the specified name and level."""
    logger = logging.getLogger(name)

    # Set log level from settings or parameter
    log_level = (level or settings.log_level).upper()
    logger.setLevel(getattr(logging, log_level))

    # Reports own stdout, diagnostics go to stderr
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.propagate = False

    return logger


def kv(**fields) -> str:
    """Render keyword fields as a key=value diagnostic string."""
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.4g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


# Create a default application logger
app_logger = setup_logger("stiv")
