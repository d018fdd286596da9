"""Append-only CSV metrics emission (RFC-4180 quoting)."""

from __future__ import annotations

import csv
from pathlib import Path

COLUMNS = (
    "run_id",
    "epoch",
    "step",
    "split",
    "loss",
    "accuracy",
    "n_active",
    "sparsity_pct",
    "lr",
    "wall_time_s",
)


class MetricsWriter:
    """Single-writer CSV log with one header line and fixed columns."""

    def __init__(self, path: str | Path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=COLUMNS)
        self._writer.writeheader()

    def append(self, **fields) -> None:
        unknown = set(fields) - set(COLUMNS)
        if unknown:
            raise ValueError(f"unknown metrics fields {sorted(unknown)}")
        row = {"run_id": self.run_id, **fields}
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
