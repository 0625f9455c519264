"""Console logging plus a JSON-lines event log inside the run's output directory."""
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Optional

RUN_LOG_NAME = "run.log"
LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"

# Events go to their own logger so the run log holds nothing but JSON lines.
event_logger = logging.getLogger("cliptrain.events")
event_logger.setLevel(logging.INFO)
event_logger.propagate = False


def configure_logging(output_dir: Optional[Path] = None, level: Optional[str] = None) -> None:
    """Attach a console handler to the ``src`` loggers and the event log file handler.

    Args:
        output_dir: Directory receiving ``run.log``; no event file when None
        level: Console level name; defaults to $CLIPTRAIN_LOG_LEVEL or INFO
    """
    level = (level or os.getenv("CLIPTRAIN_LOG_LEVEL", "INFO")).upper()
    package_logger = logging.getLogger("src")
    package_logger.setLevel(level)
    if not package_logger.handlers:
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter(LOG_FORMAT))
        package_logger.addHandler(console)

    # A new run replaces the previous run's event file.
    for handler in list(event_logger.handlers):
        event_logger.removeHandler(handler)
        handler.close()
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(Path(output_dir) / RUN_LOG_NAME, mode="w", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(message)s"))
        event_logger.addHandler(handler)


def log_event(stage: str, status: str, **fields) -> None:
    """Write one structured event as a JSON line."""
    try:
        entry = {
            "timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "stage": stage,
            "status": status,
        }
        entry.update(fields)
        event_logger.info(json.dumps(entry, default=str))
    except Exception as e:
        # Don't fail a run if logging fails
        logging.getLogger(__name__).warning("could not write event: %s", e)
