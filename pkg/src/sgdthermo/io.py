"""File formats: matrix CSV with a one-line header, plain 17-digit CSV tables."""

from __future__ import annotations

import csv
import hashlib

import numpy as np

from .errors import FormatError


def theta_hash(theta) -> str:
    """Short SHA-256 of theta as little-endian float64, identifying where a matrix was evaluated."""
    raw = np.ascontiguousarray(np.asarray(theta, dtype="<f8")).tobytes()
    return hashlib.sha256(raw).hexdigest()[:16]


def fmt(x) -> str:
    return repr(float(x)) if np.isfinite(x) else str(float(x))


def write_matrix_csv(path, A, symbol: str, theta=None) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    h = theta_hash(theta) if theta is not None else "none"
    with open(path, "w", newline="") as fh:
        fh.write(f"rows={A.shape[0]},cols={A.shape[1]},symbol={symbol},theta_hash={h}\n")
        for row in A:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_matrix_csv(path):
    """Returns (matrix, header dict)."""
    with open(path) as fh:
        first = fh.readline().strip()
        try:
            head = dict(item.split("=", 1) for item in first.split(","))
            rows, cols = int(head["rows"]), int(head["cols"])
        except (ValueError, KeyError) as exc:
            raise FormatError(f"bad matrix header {first!r}") from exc
        body = np.loadtxt(fh, delimiter=",", ndmin=2) if rows else np.zeros((0, cols))
    if body.shape != (rows, cols):
        raise FormatError(f"matrix body {body.shape} does not match header {(rows, cols)}")
    return body, head


def write_table_csv(path, columns: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["%.17g" % v if isinstance(v, (float, np.floating)) else v for v in r])


def read_table_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        rows = [row for row in r]
    return head, rows
