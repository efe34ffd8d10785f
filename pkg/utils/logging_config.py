"""
Logging configuration for the simulator.
"""

import logging
import logging.handlers
from datetime import datetime
from pathlib import Path
from typing import Union


def setup_logging(
    module_name: str,
    log_dir: Union[str, Path] = "logs",
    level: Union[int, str] = logging.INFO,
    to_file: bool = True,
) -> logging.Logger:
    """
    Set up logging for a module with file and console handlers.

    Args:
        module_name: Name of the module for logger
        log_dir: Directory receiving the rotating log files
        level: Console level
        to_file: Disable to keep logging console-only (tests, read-only dirs)

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(module_name)
    logger.setLevel(logging.DEBUG)

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()

    file_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    console_formatter = logging.Formatter(
        '%(levelname)s: %(message)s'
    )

    if to_file:
        logs_dir = Path(log_dir)
        logs_dir.mkdir(parents=True, exist_ok=True)
        log_file = logs_dir / f"{module_name}_{datetime.now().strftime('%Y%m%d')}.log"
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(console_formatter)
    logger.addHandler(console_handler)

    return logger

