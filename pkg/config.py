import os
import logging
from logging.handlers import RotatingFileHandler

from dotenv import load_dotenv

# Load env variables locally
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
ROOT_LOGGER = "crazylink"


def configure_logging(level: str | None = None) -> logging.Logger:
    """Attach console (and optional rotating file) handlers to the crazylink logger."""
    logger = logging.getLogger(ROOT_LOGGER)
    level_name = (level or os.getenv("CRAZYLINK_LOG_LEVEL", "INFO")).upper()
    logger.setLevel(getattr(logging, level_name, logging.INFO))

    # Add handlers to the logger
    if not logger.handlers:
        c_handler = logging.StreamHandler()
        c_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(c_handler)

        log_file = os.getenv("CRAZYLINK_LOG_FILE")
        if log_file:
            f_handler = RotatingFileHandler(log_file, maxBytes=10*1024*1024, backupCount=5, encoding='utf-8')
            f_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            logger.addHandler(f_handler)

    return logger


def get_logger(module: str) -> logging.Logger:
    """Module logger nested under the crazylink root, e.g. crazylink.transport."""
    return logging.getLogger(f"{ROOT_LOGGER}.{module}")
