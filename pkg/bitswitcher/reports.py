"""
CSV reports and small formatting helpers.

Every report is a CSV file with a header row; floats are written with six
significant digits.
"""
import csv
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np


def format_bytes(size: float) -> str:
    """
    Formats a byte count into a human-readable string (e.g., KB, MB, GB).

    Args:
        size (float): Size in bytes.

    Returns:
        str: Formatted size.
    """
    for unit in ['B', 'KB', 'MB', 'GB']:
        if size < 1024:
            return f"{size:.2f} {unit}"
        size /= 1024
    return f"{size:.2f} TB"


def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


class CsvReport:
    """
    Append-only CSV writer with a fixed column set.

    The header is written when the file is created; every row must provide
    exactly the declared columns.

    Args:
        path (str | Path): Output file.
        columns (Sequence[str]): Column names in output order.
    """

    def __init__(self, path: Union[str, Path], columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self.rows_written = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as handle:
            csv.writer(handle).writerow(self.columns)

    def append(self, row: Dict[str, Any]):
        missing = [c for c in self.columns if c not in row]
        extra = [k for k in row if k not in self.columns]
        if missing or extra:
            raise ValueError(f"row for {self.path.name} has missing columns {missing} or unknown columns {extra}")
        with open(self.path, "a", newline="") as handle:
            csv.writer(handle).writerow([format_value(row[c]) for c in self.columns])
        self.rows_written += 1

    def extend(self, rows: Iterable[Dict[str, Any]]):
        for row in rows:
            self.append(row)


def write_csv(path: Union[str, Path], rows: List[Dict[str, Any]],
              columns: Optional[Sequence[str]] = None) -> Path:
    """Writes ``rows`` to ``path``; columns default to the first row's keys."""
    if columns is None:
        if not rows:
            raise ValueError(f"cannot infer columns for empty report {path}")
        columns = list(rows[0].keys())
    report = CsvReport(path, columns)
    report.extend(rows)
    logging.info(f"Wrote {report.rows_written} rows to {report.path}")
    return report.path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))
