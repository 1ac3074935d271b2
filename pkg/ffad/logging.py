import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

LOG_FORMAT = "[%(levelname)s %(name)s %(asctime)s]: %(message)s"
DATE_FORMAT = "%y-%m-%d %H:%M:%S"

Level = Union[int, str]


class RepetitiveFilter(logging.Filter):
    """
    Suppress similar log messages after a number of repeats. Messages are keyed by call
    site, so a warning emitted once per skipped log line or gap cell shows up at most
    `max_repeats + 1` times.

    One instance is shared by all handlers of a logger; each record is counted once no
    matter how many handlers see it.
    """

    def __init__(self, max_repeats: int = 5):
        super().__init__()
        self.max_repeats = max_repeats
        self._seen: Dict[Tuple[str, int], int] = {}

    def filter(self, record: logging.LogRecord) -> bool:
        repeat = getattr(record, "_repeat_count", None)
        if repeat is None:
            site = (record.pathname, record.lineno)
            repeat = self._seen.get(site, 0)
            self._seen[site] = repeat + 1
            if repeat == self.max_repeats:
                record.msg = f"{record.msg} [future messages suppressed]"
            record._repeat_count = repeat
        return repeat <= self.max_repeats


def _as_level(level: Level) -> int:
    if isinstance(level, str):
        value = logging.getLevelName(level.upper())
        if not isinstance(value, int):
            raise ValueError(f"Unknown log level {level!r}")
        return value
    return level


def _reset(logger: logging.Logger):
    for f in list(logger.filters):
        logger.removeFilter(f)
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()


def setup_logging(
    name: Optional[str] = "ffad",
    level: Optional[Level] = None,
    log_path: Optional[Union[str, Path]] = None,
    max_repeats: Optional[int] = 5,
    overwrite: bool = False,
    propagate: bool = False,
    file_level: Level = logging.DEBUG,
) -> logging.Logger:
    """
    Setup the ffad logger (or any named logger).

    Console records go to stdout at `level`. When `log_path` is given, records are also
    appended to that file at `file_level`, so a run log keeps DEBUG diagnostics even
    when the console is quiet. An already configured logger is returned untouched unless
    `overwrite` is set.
    """
    logger = logging.getLogger(name=name)
    if logger.handlers and not overwrite:
        return logger
    _reset(logger)

    console_level = logger.getEffectiveLevel() if level is None else _as_level(level)
    handlers: List[Tuple[logging.Handler, int]] = [
        (logging.StreamHandler(sys.stdout), console_level)
    ]
    if log_path is not None:
        handlers.append((logging.FileHandler(log_path, mode="a"), _as_level(file_level)))
    logger.setLevel(min(lvl for _, lvl in handlers))

    # Child loggers (ffad.ingest.logs, ...) bypass logger-level filters.
    repeat_filter = RepetitiveFilter(max_repeats) if max_repeats else None
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    for handler, handler_level in handlers:
        handler.setFormatter(formatter)
        handler.setLevel(handler_level)
        if repeat_filter is not None:
            handler.addFilter(repeat_filter)
        logger.addHandler(handler)

    logger.propagate = propagate
    return logger
