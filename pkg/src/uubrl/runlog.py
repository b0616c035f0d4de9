"""Fixed-schema training log with byte-stable CSV output.

Floats are written with repr so a rerun under the same seed produces an
identical file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field


@dataclass
class RunLog:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def append(self, **values) -> None:
        missing = set(self.columns) - set(values)
        extra = set(values) - set(self.columns)
        if missing or extra:
            raise ValueError(f"log row mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        self.rows.append(tuple(values[c] for c in self.columns))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_format(v) for v in row])

    @classmethod
    def from_csv(cls, path: str) -> "RunLog":
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            rows = [tuple(_parse(v) for v in row) for row in reader]
        return cls(header, rows)


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text
