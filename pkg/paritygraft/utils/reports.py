import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Mapping, Optional

import jsonschema
import numpy as np

from paritygraft import __version__

logger = logging.getLogger(__name__)

INF_SENTINEL = "+inf"


@dataclass(frozen=True)
class ExperimentReport:
    experiment: str
    config: dict
    result: dict
    version: str = __version__
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "version": self.version,
            "timestamp": self.timestamp,
            "config": jsonable(self.config),
            "result": jsonable(self.result),
        }


def report_schema() -> dict:
    """JSON schema every report conforms to, versioned with the package."""
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": f"paritygraft/report/{__version__}",
        "title": "paritygraft experiment report",
        "type": "object",
        "required": ["experiment", "version", "timestamp", "config", "result"],
        "properties": {
            "experiment": {"type": "string", "minLength": 1},
            "version": {"const": __version__},
            "timestamp": {"type": "string", "minLength": 1},
            "config": {
                "type": "object",
                "required": ["seed"],
                "properties": {"seed": {"type": "integer", "minimum": 0}},
            },
            "result": {
                "type": "object",
                "properties": {
                    "table": {"type": "array", "items": {"type": "object"}},
                },
            },
        },
        "additionalProperties": False,
    }


def validate_report(doc: dict) -> None:
    jsonschema.validate(instance=doc, schema=report_schema())


def jsonable(value: Any) -> Any:
    """Plain JSON types; infinities become the "+inf" / "-inf" sentinels."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        number = float(value)
        if math.isinf(number):
            return INF_SENTINEL if number > 0 else "-inf"
        if math.isnan(number):
            return None
        return number
    return value


def _write_table(rows: list[dict], path: str) -> None:
    fieldnames: list[str] = []
    for row in rows:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: json.dumps(v) if isinstance(v, (dict, list)) else v for k, v in row.items()})


def write_outputs(files: Mapping[str, bytes]) -> None:
    for path in files:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    for path, data in files.items():
        with open(path, "wb") as handle:
            handle.write(data)
        logger.info("Wrote %s (%d bytes).", path, len(data))


def write_report(
    report: ExperimentReport,
    report_dir: str,
    stem: Optional[str] = None,
    files: Optional[Mapping[str, bytes]] = None,
) -> str:
    """Validates, then writes the run's `files`, `<stem>.json`, and `<stem>.csv` when the result carries a table.

    Nothing is written when validation fails.
    """
    doc = report.to_dict()
    validate_report(doc)
    write_outputs(files or {})
    os.makedirs(report_dir, exist_ok=True)
    stem = stem or report.experiment.replace(" ", "-")
    path = os.path.join(report_dir, f"{stem}.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write("\n")
    table = doc["result"].get("table")
    if table:
        _write_table(table, os.path.join(report_dir, f"{stem}.csv"))
    logger.info("Report written to %s.", path)
    return path
