"""CSV writing and a strict, schema-checked reader for every emitted table."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence


class CsvFormatError(ValueError):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise CsvFormatError(f"row {row!r} has {len(row)} fields, header has {len(header)}")
            w.writerow([_fmt(v) for v in row])
    return path


def _optional(parse: Callable[[str], object]) -> Callable[[str], object]:
    return lambda s: None if s == "" else parse(s)


def _finite_float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {s!r}")
    return v


FLOAT = _finite_float
INT = int
STR = str
OPT_FLOAT = _optional(_finite_float)

CONFLICT_SCHEMA = {
    "step": INT, "sim_sum_oracle": FLOAT, "sim_ssl_cls": FLOAT, "sim_ssl_oracle": FLOAT,
    "mean_skewness": OPT_FLOAT,
}
PILOT_SCHEMA = {"mode": STR, "seed": INT, "target_accuracy": FLOAT}
SWEEP_SCHEMA = {"param": STR, "value": FLOAT, "seed": INT, "stage": INT, "step": INT, "target_accuracy": FLOAT}
SKEWNESS_SCHEMA = {"step": INT, "sample_id": INT, "domain": STR, "skewness": FLOAT, "selected": INT}


def read_csv(path, schema: dict[str, Callable[[str], object]]) -> list[dict]:
    """Parse ``path`` requiring the exact header of ``schema`` and typed fields."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, expected header") from None
        if header != list(schema):
            raise CsvFormatError(f"{path}: header {header} != expected {list(schema)}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise CsvFormatError(f"{path}:{lineno}: {len(raw)} fields, expected {len(header)}")
            row = {}
            for (name, parse), cell in zip(schema.items(), raw):
                try:
                    row[name] = parse(cell)
                except ValueError as exc:
                    raise CsvFormatError(f"{path}:{lineno}: bad {name} value {cell!r} ({exc})") from None
            rows.append(row)
    return rows
