import csv
import io
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

from app.core.exceptions import ArtifactWriteError, ManifestError
from app.repositories.checkpoint_repository import atomic_write_bytes
from app.schemas.results import MetricCurve, TrainingMetricsRow


logger = logging.getLogger(__name__)

TRAINING_COLUMNS = list(TrainingMetricsRow.model_fields)
CURVE_COLUMNS = ["method", "metric", "step", "value", "seed"]


def _csv_bytes(fieldnames: Sequence[str], rows: Iterable[Dict[str, Any]]) -> bytes:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue().encode()


def _read_rows(path: Path) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(path, "CSV file not found")
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


class MetricsRepository:
    """CSV persistence for training metrics and evaluation curves.

    Floats are written with ``repr`` precision so a parse returns the exact values.
    """

    def append_training_row(self, path: Path, row: TrainingMetricsRow) -> None:
        path = Path(path)
        new_file = not path.is_file()
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("a", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=TRAINING_COLUMNS, lineterminator="\n")
                if new_file:
                    writer.writeheader()
                writer.writerow(row.model_dump())
        except OSError as e:
            raise ArtifactWriteError(path, "Could not append metrics row") from e

    def read_training_rows(self, path: Path) -> List[TrainingMetricsRow]:
        return [TrainingMetricsRow.model_validate(row) for row in _read_rows(path)]

    def truncate_training_rows(self, path: Path, last_step: int) -> int:
        """Drop rows after ``last_step`` (used when resuming); returns the rows kept."""
        path = Path(path)
        if not path.is_file():
            return 0
        kept = [row for row in self.read_training_rows(path) if row.step <= last_step]
        atomic_write_bytes(path, _csv_bytes(TRAINING_COLUMNS, (row.model_dump() for row in kept)))
        return len(kept)

    def write_curves(self, curves: Sequence[MetricCurve], path: Path) -> Path:
        rows = (
            {"method": c.method, "metric": c.metric, "step": step, "value": value, "seed": c.seed}
            for c in curves
            for step, value in enumerate(c.values, start=1)
        )
        atomic_write_bytes(path, _csv_bytes(CURVE_COLUMNS, rows))
        logger.info(f"Wrote {len(curves)} curves to {path}")
        return Path(path)

    def read_curves(self, path: Path) -> List[MetricCurve]:
        grouped: "OrderedDict[tuple, Dict[int, float]]" = OrderedDict()
        for row in _read_rows(path):
            key = (row["method"], row["metric"], int(row["seed"]))
            grouped.setdefault(key, {})[int(row["step"])] = float(row["value"])
        return [
            MetricCurve(method=method, metric=metric, seed=seed, values=[steps[s] for s in sorted(steps)])
            for (method, metric, seed), steps in grouped.items()
        ]

    def write_table(self, rows: Sequence[Dict[str, Any]], fieldnames: Sequence[str], path: Path) -> Path:
        return atomic_write_bytes(path, _csv_bytes(fieldnames, rows))
