"""Delimited-text helpers shared by the file formats (17 significant digits)."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence


def fmt(v) -> str:
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return str(v)
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> None:
    with open(Path(path), "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_rows(path) -> tuple[list[str], list[str], list[list[str]]]:
    """Return (comment lines, header, rows) from a file written by :func:`write_rows`."""
    comments = []
    with open(Path(path), newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#") and not body:
            comments.append(line[1:].strip())
        elif line:
            body.append(line)
    reader = list(csv.reader(body))
    if not reader:
        raise ValueError(f"{path}: no header row")
    return comments, reader[0], reader[1:]
