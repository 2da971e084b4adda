import logging
import os
from datetime import datetime

FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CONSOLE_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def _log_dir():
    """Directory for log files, created on first use"""
    log_dir = os.environ.get("TRIDIFF_LOG_DIR", "logs")
    os.makedirs(log_dir, exist_ok=True)
    return log_dir


def _dated_file_handler(log_dir, prefix, level):
    stamp = datetime.now().strftime("%Y%m%d")
    handler = logging.FileHandler(os.path.join(log_dir, f"{prefix}_{stamp}.log"), encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(FILE_FORMAT))
    return handler


def setup_logging(name="tridiff"):
    """Setup logging for one toolkit module

    Every record goes to logs/all_YYYYMMDD.log and the console, errors also
    to logs/error_YYYYMMDD.log. Calling again for the same name swaps the
    handlers instead of adding a second set.

    Args:
        name (str): Name of the logger, defaults to 'tridiff'
    """
    log_dir = _log_dir()

    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))

    logger = logging.getLogger(name)
    logger.setLevel(logging.INFO)
    logger.propagate = False

    for handler in list(logger.handlers):
        handler.close()
    logger.handlers = []

    logger.addHandler(_dated_file_handler(log_dir, "all", logging.INFO))
    logger.addHandler(_dated_file_handler(log_dir, "error", logging.ERROR))
    logger.addHandler(console_handler)

    return logger
