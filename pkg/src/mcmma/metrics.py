"""Latency metrics: relative latency, frame-to-time conversion, head spread."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# frames are subsampled 8x from a 10 ms shift, so one frame is 80 ms
DEFAULT_REDUCTION = 8
DEFAULT_SHIFT_MS = 10.0


@dataclass
class LatencyReport:
    rel_frames: float
    rel_ms: float
    L_min: int
    per_step_diffs: list
    b_hyp: list = field(default_factory=list)
    b_ref: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "b_hyp", "b_ref", "diff"])
        for i, (h, r, d) in enumerate(zip(self.b_hyp, self.b_ref, self.per_step_diffs), start=1):
            w.writerow([i, h, r, repr(float(d))])
        buf.write(f"# rel_frames={self.rel_frames!r} rel_ms={self.rel_ms!r}\n")
        return buf.getvalue()


def to_milliseconds(rel_frames: float, reduction_factor: int = DEFAULT_REDUCTION, shift_ms: float = DEFAULT_SHIFT_MS) -> float:
    if reduction_factor < 1:
        raise ValueError(f"reduction_factor must be >= 1, got {reduction_factor}")
    if shift_ms <= 0:
        raise ValueError(f"shift_ms must be positive, got {shift_ms}")
    return rel_frames * reduction_factor * shift_ms


def relative_latency(
    b_hyp: Sequence[int],
    b_ref: Sequence[int],
    reduction_factor: int = DEFAULT_REDUCTION,
    shift_ms: float = DEFAULT_SHIFT_MS,
) -> LatencyReport:
    """Mean signed boundary difference over the first ``min(len(b_hyp), len(b_ref))`` steps."""
    if len(b_hyp) == 0 or len(b_ref) == 0:
        raise ValueError("boundary sequences must be non-empty")
    n = min(len(b_hyp), len(b_ref))
    diffs = [float(b_hyp[i]) - float(b_ref[i]) for i in range(n)]
    rel = sum(diffs) / n
    return LatencyReport(
        rel_frames=rel,
        rel_ms=to_milliseconds(rel, reduction_factor, shift_ms),
        L_min=n,
        per_step_diffs=diffs,
        b_hyp=list(b_hyp[:n]),
        b_ref=list(b_ref[:n]),
    )


def boundary_spread(trace) -> tuple:
    """Per-step ``max - min`` boundary over heads, and the largest of them."""
    if not trace.steps:
        raise ValueError("trace has no steps")
    spreads = [rec.spread for rec in trace.steps]
    return spreads, max(spreads)


def token_errors(hyp: Sequence[int], ref: Sequence[int]) -> int:
    """Levenshtein distance between two token sequences."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]

