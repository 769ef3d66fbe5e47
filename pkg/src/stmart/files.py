"""CSV and adjacency-file reading and atomic writing."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from pathlib import Path


class InputError(ValueError):
    """Unparseable input file; the message carries file and line numbers."""


def read_csv_rows(path) -> tuple[list[str], list[dict]]:
    """Read a UTF-8 CSV with a header row into a list of dicts (values as strings)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot read: {exc}") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InputError(f"{path}: empty file") from None
    header = [h.strip() for h in header]
    if len(set(header)) != len(header) or any(not h for h in header):
        raise InputError(f"{path}:1: header has empty or duplicate column names")
    rows, problems = [], []
    for record in reader:
        line = reader.line_num
        if not record or all(not f.strip() for f in record):
            continue
        if len(record) != len(header):
            problems.append(f"{path}:{line}: expected {len(header)} fields, got {len(record)}")
            continue
        rows.append(dict(zip(header, (f.strip() for f in record))))
    if problems:
        raise InputError("\n".join(problems[:20]))
    if not rows:
        raise InputError(f"{path}: no data rows")
    return header, rows


def read_adjacency(path) -> list[tuple[str, str]]:
    """Read a tab-separated edge list; ``#`` starts a comment."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot read: {exc}") from None
    edges, problems = [], []
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].rstrip("\r\n")
        if not body.strip():
            continue
        parts = [p.strip() for p in body.split("\t")]
        if len(parts) != 2 or not all(parts):
            problems.append(f"{path}:{lineno}: expected 'tract<TAB>tract', got {line!r}")
            continue
        edges.append((parts[0], parts[1]))
    if problems:
        raise InputError("\n".join(problems[:20]))
    if not edges:
        raise InputError(f"{path}: no edges")
    return edges


def format_value(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    if hasattr(v, "dtype"):
        return format_value(v.item())
    return str(v)


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_adjacency(path, graph):
    lines = ["# tract_a\ttract_b"]
    for i, j in graph.edges:
        lines.append(f"{graph.tract_ids[i]}\t{graph.tract_ids[j]}")
    atomic_write_text(path, "\n".join(lines) + "\n")
