import logging
from pathlib import Path

import pytest

from ffad.logging import setup_logging


def test_setup_logging(tmp_path: Path):
    log_path = tmp_path / "log.txt"
    logger = setup_logging(
        level=logging.INFO,
        log_path=tmp_path / "log.txt",
        max_repeats=5,
        overwrite=True,
    )

    for ii in range(0, 10):
        logger.info(f"log msg {ii}")

    log = log_path.read_text().strip().split("\n")
    assert len(log) == 6
    assert log[-1].endswith("[future messages suppressed]")


def test_child_logger_suppressed(tmp_path: Path):
    log_path = tmp_path / "log.txt"
    setup_logging(level=logging.INFO, log_path=log_path, max_repeats=2, overwrite=True)
    child = logging.getLogger("ffad.ingest.logs")

    for ii in range(5):
        child.warning("Skipping log line %d", ii)

    log = log_path.read_text().strip().split("\n")
    assert len(log) == 3
    assert "ffad.ingest.logs" in log[0]


def test_run_log_keeps_debug(tmp_path: Path, capsys):
    log_path = tmp_path / "run.log"
    logger = setup_logging(level="WARNING", log_path=log_path, overwrite=True)
    logger.debug("mask rate %.2f", 0.25)
    logger.warning("constant metric column %s", "metric_3")

    out = capsys.readouterr().out
    assert "mask rate" not in out
    assert "constant metric column" in out

    log = log_path.read_text()
    assert "[DEBUG ffad" in log
    assert "mask rate 0.25" in log


def test_unknown_level():
    with pytest.raises(ValueError, match="log level"):
        setup_logging(level="LOUD", overwrite=True)


if __name__ == "__main__":
    pytest.main([__file__])
