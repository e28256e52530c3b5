"""Annotation and candidate records plus their CSV exchange formats."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable

from .errors import CsvFieldError, CsvHeaderError

ANNOTATION_HEADER = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm")
CANDIDATE_HEADER = ("seriesuid", "coordX", "coordY", "coordZ", "probability")


@dataclass(frozen=True)
class Annotation:
    uid: str
    x: float
    y: float
    z: float
    diameter: float

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"annotation diameter must be positive, got {self.diameter}")

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class Candidate:
    uid: str
    x: float
    y: float
    z: float
    probability: float
    source: str = "stage-1"

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"candidate score must lie in [0, 1], got {self.probability}")

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


def _fmt(value: float) -> str:
    return repr(float(value))


def _rows(text: str, header: tuple[str, ...], kind: str):
    reader = csv.reader(io.StringIO(text))
    try:
        first = next(reader)
    except StopIteration:
        raise CsvHeaderError(f"{kind} CSV is empty; expected header {','.join(header)}") from None
    if tuple(h.strip() for h in first) != header:
        raise CsvHeaderError(f"{kind} CSV header {','.join(first)!r} != {','.join(header)!r}")
    for rowno, row in enumerate(reader, 2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise CsvFieldError(f"{kind} CSV row {rowno}: expected {len(header)} fields, got {len(row)}")
        values = [row[0]]
        for col, cell in zip(header[1:], row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise CsvFieldError(
                    f"{kind} CSV row {rowno}, column {col}: {cell!r} is not a number"
                ) from None
            if not math.isfinite(v):
                raise CsvFieldError(f"{kind} CSV row {rowno}, column {col}: {cell!r} is not finite")
            values.append(v)
        yield rowno, values


def read_annotations(text: str) -> list[Annotation]:
    out = []
    for rowno, (uid, x, y, z, d) in _rows(text, ANNOTATION_HEADER, "annotation"):
        if d <= 0:
            raise CsvFieldError(f"annotation CSV row {rowno}, column diameter_mm: must be positive, got {d!r}")
        out.append(Annotation(uid, x, y, z, d))
    return out


def read_candidates(text: str, source: str = "stage-1") -> list[Candidate]:
    out = []
    for rowno, (uid, x, y, z, p) in _rows(text, CANDIDATE_HEADER, "candidate"):
        if not 0.0 <= p <= 1.0:
            raise CsvFieldError(f"candidate CSV row {rowno}, column probability: {p!r} outside [0, 1]")
        out.append(Candidate(uid, x, y, z, p, source))
    return out


def _write(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_annotations(annotations: Iterable[Annotation]) -> str:
    return _write(
        ANNOTATION_HEADER,
        ([a.uid, _fmt(a.x), _fmt(a.y), _fmt(a.z), _fmt(a.diameter)] for a in annotations),
    )


def write_candidates(candidates: Iterable[Candidate]) -> str:
    return _write(
        CANDIDATE_HEADER,
        ([c.uid, _fmt(c.x), _fmt(c.y), _fmt(c.z), _fmt(c.probability)] for c in candidates),
    )


def load_annotations(path: str) -> list[Annotation]:
    with open(path, newline="") as fh:
        return read_annotations(fh.read())


def load_candidates(path: str, source: str = "stage-1") -> list[Candidate]:
    with open(path, newline="") as fh:
        return read_candidates(fh.read(), source)


def save_text(path: str, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
