import logging.config
from typing import Optional

from config.settings import settings


# Logging configuration
LOGGING_CONFIG = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "default": {
            "format": settings.LOG_FORMAT,
            "datefmt": "%Y-%m-%d %H:%M:%S",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "default",
            "stream": "ext://sys.stderr",
        },
    },
    "loggers": {
        "app": {"handlers": ["console"], "level": settings.LOG_LEVEL, "propagate": False},
        "data": {"handlers": ["console"], "level": settings.LOG_LEVEL, "propagate": False},
    },
    # matplotlib and PIL are chatty at DEBUG
    "root": {"handlers": ["console"], "level": "WARNING"},
}


def setup_logging(level: Optional[str] = None) -> None:
    """Apply LOGGING_CONFIG, optionally overriding the package log level"""
    config = LOGGING_CONFIG
    if level is not None:
        config = {**LOGGING_CONFIG, "loggers": {
            name: {**logger_cfg, "level": level.upper()}
            for name, logger_cfg in LOGGING_CONFIG["loggers"].items()
        }}
    logging.config.dictConfig(config)
