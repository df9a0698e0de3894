"""
Logging for boat-match.

Every message is stamped with the caller's ``[file:line:function]`` so that warnings raised deep in the numerics
(constant columns, divergent transitions, clamped ELBO samples) can be traced back without a debugger.

Environment:
- ``BOAT_DEBUG``: any value turns on DEBUG level.
- ``BOAT_LOG_FILE``: when set, records are also appended to that file.
"""

import inspect
import logging
import os
from typing import List

DEBUG = os.getenv("BOAT_DEBUG", None) is not None
LOG_FILE = os.getenv("BOAT_LOG_FILE", None)
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def get_logging_level() -> int:
    if DEBUG is True:  # pragma: no cover
        return logging.DEBUG  # pragma: no cover
    return logging.INFO


logger = logging.getLogger("boat_match")
logger.setLevel(get_logging_level())

if not logger.handlers:
    sch = logging.StreamHandler()
    sch.setFormatter(logging.Formatter("%(levelname)s - %(message)s"))
    logger.addHandler(sch)
    if LOG_FILE is not None:  # pragma: no cover
        fh = logging.FileHandler(filename=LOG_FILE)
        fh.setLevel(get_logging_level())
        fh.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(fh)


def id_caller() -> List:
    """
    Returns [file name, line number, function name] of the frame that called the LogWrapper method.
    """
    result = []
    try:
        caller_stack = inspect.stack()[2]
        result.append(caller_stack[1].split(os.sep)[-1])
        result.append(caller_stack[2])
        result.append(caller_stack[3])
    except IndexError:  # pragma: no cover
        pass
    return result


class LogWrapper:
    """
    Thin wrapper around the package logger.

    Methods mirror the stdlib levels. Messages are formatted eagerly with the caller stamp, so pass the final string.
    ``warning_count`` counts warnings issued through this wrapper; the CLI records the per-command count in run.json.
    """

    def __init__(self, logger_impl: logging.Logger = logger):
        self.logger = logger_impl
        self.debug_flag = DEBUG or logger_impl.isEnabledFor(logging.DEBUG)
        self.warning_count = 0

    def _format_msg(self, stack_data: list, message: str) -> str:
        if message is None:
            return "NO_INPUT_MESSAGE"
        message = f"{message}"
        if len(stack_data) == 3:
            message = f"[{stack_data[0]}:{stack_data[1]}:{stack_data[2]}] {message}"
        return message

    def enable_debug(self):
        self.logger.setLevel(logging.DEBUG)
        for handler in self.logger.handlers:
            handler.setLevel(logging.DEBUG)
        self.debug_flag = True

    def disable_debug(self):
        self.logger.setLevel(logging.INFO)
        for handler in self.logger.handlers:
            handler.setLevel(logging.INFO)
        self.debug_flag = False

    def info(self, message: str):
        self.logger.info(self._format_msg(stack_data=id_caller(), message=message))

    def debug(self, message: str):
        if self.debug_flag is True:
            self.logger.debug(self._format_msg(stack_data=id_caller(), message=message))

    def warning(self, message: str):
        self.warning_count += 1
        self.logger.warning(self._format_msg(stack_data=id_caller(), message=message))

    def error(self, message: str):
        self.logger.error(self._format_msg(stack_data=id_caller(), message=message))


log = LogWrapper()
