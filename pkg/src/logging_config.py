import logging
import os

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


def setup_logging(name: str = "densratio", level: str | None = None) -> logging.Logger:
    """
    Creates a console logger with a consistent format.
    Control verbosity with LOG_LEVEL env var (e.g. INFO, DEBUG); an explicit
    `level` (usually from config) wins over the env var.
    """
    level_str = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    resolved = getattr(logging, level_str, logging.INFO)

    logger = logging.getLogger(name)
    logger.setLevel(resolved)

    # Avoid duplicate handlers if the CLI is invoked several times in one process
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    logger.propagate = False
    return logger
