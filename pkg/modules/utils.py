import logging
import os
import sys

from logging import handlers
from typing import Tuple

import config
from modules.errors import ConfigError

LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def get_logger(name: str = config.LOG_NAME):
    """
    Get logging session, or create it if needed.

    The level is read from the ``ECTL_LOG`` environment variable, falling back to
    :data:`config.LOG_LEVEL`.

    Parameters
    -----------
    name: :class:`str`
        Name of the file where logs will be put.

    Returns
    -------
    :class:`logging.LoggerAdapter`
        The logging adapter.
    """
    logger = logging.getLogger("ECTL")
    level = LOG_LEVELS.get(os.environ.get("ECTL_LOG", config.LOG_LEVEL).lower(), logging.INFO)
    logger.setLevel(level)
    if not logger.handlers:
        log_path = os.path.join(config.LOG_DIR, f"{name}.log")
        os.makedirs(os.path.dirname(log_path), exist_ok=True)

        formatter = logging.Formatter("{asctime} {levelname:<8} {message}", style="{")

        # sys
        sysh = logging.StreamHandler(sys.stdout)
        sysh.setFormatter(formatter)
        logger.addHandler(sysh)

        # Log file
        fh = handlers.RotatingFileHandler(log_path, maxBytes=5 * 1024 * 1024, backupCount=2)
        fh.setFormatter(formatter)
        logger.addHandler(fh)

    return logging.LoggerAdapter(logger, extra={"session": os.getpid()})


def parse_address(address: str) -> Tuple[str, int]:
    """
    Split a ``host:port`` string.

    Parameters
    ----------------
    address: :class:`str`
        Address such as ``127.0.0.1:7878``. A bare port binds to localhost.

    Returns
    -------
    :class:`tuple`
        Host and port.
    """
    host, _, port = address.rpartition(":")
    if not port.isdigit():
        raise ConfigError(f"Invalid address: {address}")

    return host or "127.0.0.1", int(port)
