"""Probability and alignment matrix files.

Both share one layout: a header line ``T=<int>,L=<int>,M=<int>`` followed by
``M`` blocks of ``L`` comma-separated rows.  Probability rows have ``T``
columns, alignment rows ``T + 1`` (the last is the no-selection column).
Values are written with 17 significant digits so they round-trip exactly.
"""

from __future__ import annotations

import re

import numpy as np

_HEADER = re.compile(r"^\s*T\s*=\s*(\d+)\s*,\s*L\s*=\s*(\d+)\s*,\s*M\s*=\s*(\d+)\s*$")


class FormatError(ValueError):
    pass


def _read_blocks(path, extra_cols: int) -> np.ndarray:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines:
        raise FormatError(f"{path}: line 1: empty file")
    m = _HEADER.match(lines[0])
    if not m:
        raise FormatError(f"{path}: line 1: expected header 'T=<int>,L=<int>,M=<int>', got {lines[0]!r}")
    T, L, M = (int(g) for g in m.groups())
    if min(T, L, M) < 1:
        raise FormatError(f"{path}: line 1: T, L and M must be >= 1")
    body = [(n, ln) for n, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != M * L:
        raise FormatError(f"{path}: expected {M * L} data rows ({M} blocks of {L}), found {len(body)}")
    ncols = T + extra_cols
    out = np.empty((M * L, ncols))
    for r, (lineno, ln) in enumerate(body):
        cells = ln.split(",")
        if len(cells) != ncols:
            raise FormatError(f"{path}: line {lineno}: expected {ncols} columns, found {len(cells)}")
        for c, cell in enumerate(cells):
            try:
                out[r, c] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}, column {c + 1}: not a number: {cell!r}") from None
    return out.reshape(M, L, ncols)


def read_probabilities(path) -> np.ndarray:
    """``(M, L, T)`` selection probabilities; entries must lie in [0, 1]."""
    p = _read_blocks(path, 0)
    bad = np.argwhere(~((p >= 0.0) & (p <= 1.0)))
    if len(bad):
        m, i, j = bad[0]
        lineno = 2 + m * p.shape[1] + i
        raise FormatError(f"{path}: line {lineno}, column {j + 1}: probability {p[m, i, j]!r} outside [0, 1]")
    return p


def read_alignments(path) -> np.ndarray:
    return _read_blocks(path, 1)


def format_blocks(arr, T: int) -> str:
    arr = np.asarray(arr, dtype=np.float64)
    M, L = arr.shape[:2]
    lines = [f"T={T},L={L},M={M}"]
    for block in arr:
        for row in block:
            lines.append(",".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def write_probabilities(path, p):
    p = np.asarray(p)
    with open(path, "w") as f:
        f.write(format_blocks(p, p.shape[-1]))


def write_alignments(path, alignments):
    a = np.asarray(alignments)
    with open(path, "w") as f:
        f.write(format_blocks(a, a.shape[-1] - 1))
