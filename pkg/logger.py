# logger.py
"""
Logging configuration for the SEA affordance pipeline
Provides structured console (and optional run-file) logging for training and evaluation
"""

import logging
import sys
from pathlib import Path
from typing import Optional, Union

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
_DATEFMT = '%Y-%m-%d %H:%M:%S'

# Names of every logger configured through setup_logger
_configured = set()


def setup_logger(
    name: str,
    log_level: str = "INFO",
    log_file: Optional[Union[str, Path]] = None,
) -> logging.Logger:
    """
    Setup and configure logger

    Args:
        name: Logger name (usually __name__ from calling module)
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional path; when given, records are also appended there

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    logger.setLevel(getattr(logging, log_level.upper()))

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()

    formatter = logging.Formatter(fmt=_FORMAT, datefmt=_DATEFMT)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    # Prevent propagation to root logger
    logger.propagate = False

    _configured.add(name)
    return logger


# File handler of the current run, shared by every configured logger
_run_handler: Optional[logging.FileHandler] = None


def attach_run_log(log_file: Union[str, Path]) -> logging.FileHandler:
    """Route every logger this project created to `log_file`; a previous run file is detached first"""
    global _run_handler
    detach_run_log()
    formatter = logging.Formatter(fmt=_FORMAT, datefmt=_DATEFMT)
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_file, encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(formatter)
    for name in sorted(_configured):
        logging.getLogger(name).addHandler(handler)
    _run_handler = handler
    return handler


def detach_run_log() -> None:
    """Remove and close the current run file handler, if any"""
    global _run_handler
    if _run_handler is None:
        return
    for name in sorted(_configured):
        logging.getLogger(name).removeHandler(_run_handler)
    _run_handler.close()
    _run_handler = None
