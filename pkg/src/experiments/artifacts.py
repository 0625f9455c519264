"""Run output directory: CSV/JSON writers, stage bookkeeping and the manifest."""
import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from src.run_log import log_event
from src.training import HISTORY_COLUMNS, TrainHistory

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.csv"


class StageError(RuntimeError):
    """A fatal stage failed; the recipe cannot continue."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


def derive_seeds(master: int, count: int) -> List[int]:
    """Independent, reproducible child seeds of a master seed."""
    children = np.random.SeedSequence(master).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


@dataclass
class StageRecord:
    name: str
    status: str = "running"
    error: Optional[str] = None
    seconds: Optional[float] = None


@dataclass
class RunArtifacts:
    """Everything a recipe writes lives under ``output_dir``.

    Args:
        output_dir: Root of the run's artifacts
        timing: Record wall-clock seconds per stage in report and manifest
    """

    output_dir: Path
    timing: bool = False
    stages: List[StageRecord] = field(default_factory=list)
    files: List[str] = field(default_factory=list)
    histories: List[tuple] = field(default_factory=list)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    @property
    def failed(self) -> bool:
        return any(s.status == "error" for s in self.stages)

    def path(self, name: str) -> Path:
        target = (self.output_dir / name).resolve()
        if self.output_dir.resolve() not in target.parents:
            raise ValueError(f"artifact '{name}' would land outside {self.output_dir}")
        target.parent.mkdir(parents=True, exist_ok=True)
        relative = target.relative_to(self.output_dir.resolve()).as_posix()
        if relative not in self.files:
            self.files.append(relative)
        return target

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self.path(name)
        with open(target, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows([_cell(v) for v in row] for row in rows)
        return target

    def write_records(self, name: str, records: Sequence[Dict[str, Any]]) -> Path:
        """CSV of dict rows; the first record's keys are the header."""
        header = list(records[0].keys()) if records else []
        return self.write_csv(name, header, ([r.get(k) for k in header] for r in records))

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.path(name)
        target.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return target

    def add_history(self, run: str, history: TrainHistory) -> None:
        self.histories.append((run, history))

    def write_metrics(self) -> Path:
        """All training histories, one row per minibatch, labelled by run."""
        rows = []
        for run, history in self.histories:
            rows.extend(history.csv_rows(run))
        target = self.path(METRICS_NAME)
        with open(target, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["run"] + list(HISTORY_COLUMNS))
            writer.writerows(rows)
        return target

    def timings(self) -> Dict[str, float]:
        return {s.name: s.seconds for s in self.stages if s.seconds is not None}

    @contextmanager
    def stage(self, name: str, fatal: bool = True):
        """Time and record one stage.

        A failing fatal stage raises StageError; a failing non-fatal stage is
        recorded and the recipe continues with the next one.
        """
        record = StageRecord(name)
        self.stages.append(record)
        log_event(name, "start")
        start = time.perf_counter()
        try:
            yield record
        except Exception as e:
            record.status, record.error = "error", f"{type(e).__name__}: {e}"
            logger.error("stage %s failed: %s", name, record.error)
            log_event(name, "error", error=record.error)
            if fatal:
                raise StageError(name, e) from e
        else:
            record.status = "ok"
            log_event(name, "ok")
        finally:
            if self.timing:
                record.seconds = round(time.perf_counter() - start, 3)

    def write_manifest(self, recipe: str, config: Dict[str, Any]) -> Path:
        stages = []
        for s in self.stages:
            entry = {"name": s.name, "status": s.status}
            if s.error:
                entry["error"] = s.error
            if self.timing and s.seconds is not None:
                entry["seconds"] = s.seconds
            stages.append(entry)
        self.path(MANIFEST_NAME)
        manifest = {
            "recipe": recipe,
            "config": config,
            "stages": stages,
            "partial": self.failed,
            "files": sorted(self.files),
        }
        return self.write_json(MANIFEST_NAME, manifest)


def _cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return value
