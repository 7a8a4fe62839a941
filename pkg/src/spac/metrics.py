"""The single metrics row schema shared by every command, and its CSV log."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class MetricsRow:
    run_id: str
    global_step: int
    pair: int
    episode_step: int
    dice: float
    reward: float
    ncc: float
    j_q: float = 0.0
    j_kappa: float = 0.0
    j_reg: float = 0.0
    alpha: float = 0.0
    wall_clock: float = 0.0


COLUMNS = [f.name for f in fields(MetricsRow)]
# columns that legitimately differ between two otherwise identical runs
NONDETERMINISTIC = {"wall_clock"}


class MetricsLog:
    """Append-only CSV writer (UTF-8, header row, RFC-4180 quoting)."""

    def __init__(self, path: str | os.PathLike, truncate_after_step: int | None = None):
        self.path = Path(path)
        if truncate_after_step is not None and self.path.exists():
            kept = [r for r in read_rows(self.path) if int(r["global_step"]) <= truncate_after_step]
            self._write_all(kept)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._fh, fieldnames=COLUMNS)
        if new:
            self._writer.writeheader()
            self._fh.flush()

    def _write_all(self, rows: list[dict]) -> None:
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS)
            w.writeheader()
            w.writerows(rows)

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow({k: _fmt(v) for k, v in asdict(row).items()})

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_rows(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def comparable(rows: list[dict]) -> list[tuple]:
    """Rows with the wall-clock column dropped, for reproducibility checks."""
    return [tuple(r[c] for c in COLUMNS if c not in NONDETERMINISTIC) for r in rows]
