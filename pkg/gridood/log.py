import logging
import logging.config
import os

from dotenv import load_dotenv


class Log():
    def __init__(self, verbose: bool = False):
        # Pick up GRIDOOD_* variables from a local .env, if any
        load_dotenv()

        package_logger = logging.getLogger("gridood")

        # If you have a logging config, use it
        if "GRIDOOD_LOGGING_CONFIG" in os.environ:
            logging.config.fileConfig(os.environ.get("GRIDOOD_LOGGING_CONFIG"),
                                      disable_existing_loggers=False)
            return

        level_name = os.environ.get("GRIDOOD_LOG_LEVEL", "DEBUG" if verbose else "INFO").upper()
        level = logging.getLevelName(level_name)
        if not isinstance(level, int):
            package_logger.warning(f"Unknown GRIDOOD_LOG_LEVEL {level_name!r}, falling back to INFO")
            level = logging.INFO
        package_logger.setLevel(level)


def setup_logging(verbose: bool = False) -> None:
    """Configure the package logger from the environment (see ``Log``)."""
    Log(verbose)
