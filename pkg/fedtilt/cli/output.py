import csv
import io
import json
import os
import tempfile
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from fedtilt.metrics import ROUND_COLUMNS, RoundRecord


def write_atomic(path: Path, content: str) -> None:
    """Write a file through a temporary sibling and an atomic rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    descriptor, temporary = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(descriptor, "w", newline="") as file:
            file.write(content)
        Path(temporary).replace(path)
    except BaseException:
        Path(temporary).unlink(missing_ok=True)
        raise


def format_csv(columns: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def write_rounds_csv(path: Path, records: Sequence[RoundRecord]) -> None:
    write_atomic(path, format_csv(ROUND_COLUMNS, [record.as_row() for record in records]))


def write_summary(
    path: Path,
    records: Sequence[RoundRecord],
    config: Mapping[str, Any],
    config_hash: str,
    wall_time_seconds: float,
) -> None:
    summary = {
        "final": records[-1].as_dict() if records else None,
        "rounds": len(records),
        "method": config["method"],
        "seed": config["seed"],
        "config_hash": config_hash,
        "config": dict(config),
        "wall_time_seconds": wall_time_seconds,
    }
    write_atomic(path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
