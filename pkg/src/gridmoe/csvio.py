"""CSV artifacts: every file carries a schema-version comment plus a header.

Floats are rendered with repr-level precision so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence


def format_value(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


class CsvLogger:
    """Streaming writer used for per-iteration logs."""

    def __init__(self, path, columns: Sequence[str], schema: str):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(f"# schema={schema}.v1\n")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.columns)

    def write(self, row: dict) -> None:
        self._writer.writerow([format_value(row[c]) for c in self.columns])

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, columns: Sequence[str], rows: Iterable[dict], schema: str) -> None:
    with CsvLogger(path, columns, schema) as logger:
        for row in rows:
            logger.write(row)


def read_csv(path) -> list[dict]:
    """Read one of our CSVs back, skipping schema comment lines."""
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))
