import logging
import sys
import os

# Add project root to the Python path to allow root-level imports like 'config'
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import config


class CustomFormatter(logging.Formatter):
    """Colored console formatter: level name tinted, message untouched."""

    GREY = "\x1b[38;20m"
    YELLOW = "\x1b[33;20m"
    RED = "\x1b[31;20m"
    BOLD_RED = "\x1b[31;1m"
    CYAN = "\x1b[36;20m"
    RESET = "\x1b[0m"

    LEVEL_COLORS = {
        logging.DEBUG: GREY,
        logging.INFO: CYAN,
        logging.WARNING: YELLOW,
        logging.ERROR: RED,
        logging.CRITICAL: BOLD_RED
    }

    def format(self, record):
        log_color = self.LEVEL_COLORS.get(record.levelno, self.RESET)
        levelname = record.levelname
        record.levelname = f"{log_color}{levelname}{self.RESET}"
        result = super().format(record)
        # Restore levelname so the run-log file handler stays uncolored
        record.levelname = levelname
        return result


def _level() -> int:
    return getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)


def setup_logger(name: str):
    """Sets up a console logger with the specified name and configuration."""
    logger = logging.getLogger(name)

    if not logger.handlers:
        logger.setLevel(_level())
        handler = logging.StreamHandler(sys.stdout)
        handler.setLevel(_level())
        handler.setFormatter(CustomFormatter(config.LOG_FORMAT))
        logger.addHandler(handler)
        logger.propagate = False

    return logger


def attach_run_log(path) -> logging.Handler:
    """
    Mirrors every project logger into a plain-text file (one per training run).

    Returns the handler so the caller can detach it once the run finishes.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setLevel(_level())
    handler.setFormatter(logging.Formatter(config.FILE_LOG_FORMAT))
    for existing in list(logging.Logger.manager.loggerDict.values()):
        if isinstance(existing, logging.Logger) and existing.handlers and not existing.propagate:
            existing.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler):
    for existing in list(logging.Logger.manager.loggerDict.values()):
        if isinstance(existing, logging.Logger) and handler in existing.handlers:
            existing.removeHandler(handler)
    handler.close()
