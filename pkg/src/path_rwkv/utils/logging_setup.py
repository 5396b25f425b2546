"""
Standardized logging for the command line and library.
"""
import logging
from pathlib import Path
from typing import Callable, Optional

LOG_FORMAT = "[%(asctime)s] [%(levelname)s] [%(name)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

LogCallback = Callable[[str, str], None]


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Configure the root logger once for the process.

    Args:
        level: Logging level name (DEBUG, INFO, WARNING, ERROR)
        log_file: Optional file to mirror log lines into; parent folders are created
    """
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(path, encoding="utf-8"))

    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=DATE_FORMAT,
        handlers=handlers,
        force=True,
    )


def make_log(logger: logging.Logger, log_callback: Optional[LogCallback] = None) -> LogCallback:
    """
    Build a `log(message, level)` helper that writes to a logger and an optional callback.

    Level names follow the log view convention (INFO, SUCCESS, WARNING, ERROR, DEBUG);
    SUCCESS is logged as INFO.
    """
    def log(message: str, level: str = "INFO") -> None:
        py_level = logging.INFO if level == "SUCCESS" else getattr(logging, level, logging.INFO)
        logger.log(py_level, message)
        if log_callback:
            log_callback(message, level)

    return log
