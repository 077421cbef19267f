"""Hard monotonic decoding with head-synchronous forcing.

Conventions: heads are 0-based indices, output steps and frames are 1-based.
A head's ``prev_boundary`` is 0 before the first step, so its first scan
starts at frame 1.  Every head rescans from its previous boundary inclusive,
so reselecting the same frame is allowed.

At each step the heads scan in lockstep over absolute frame index.  Let
``f1`` be the earliest activation frame.  Heads that have not activated by
``f1 + epsilon`` are forced: to the rightmost activated boundary (never left
of their own previous boundary), or to the most probable frame between ``f1``
and ``f1 + epsilon``.  All boundaries of a step therefore lie in
``[f1, f1 + epsilon]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

FORCED_POSITIONS = ("rightmost", "argmax")
END_OF_INPUT = ("force_to_T", "emit_end")


@dataclass(frozen=True)
class DecodePolicy:
    epsilon: int
    threshold: float = 0.5
    forced_position: str = "rightmost"
    end_of_input: str = "force_to_T"

    def __post_init__(self):
        if int(self.epsilon) != self.epsilon or self.epsilon < 0:
            raise ValueError(f"epsilon must be a non-negative integer, got {self.epsilon!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.forced_position not in FORCED_POSITIONS:
            raise ValueError(f"forced_position must be one of {FORCED_POSITIONS}")
        if self.end_of_input not in END_OF_INPUT:
            raise ValueError(f"end_of_input must be one of {END_OF_INPUT}")


@dataclass
class HeadState:
    head_id: int
    prev_boundary: int = 0
    activated: bool = False
    boundary: Optional[int] = None

    def advance(self):
        self.prev_boundary = self.boundary
        self.activated = False
        self.boundary = None


@dataclass
class StepRecord:
    step: int
    boundaries: tuple
    forced: tuple
    scanned: tuple
    token: Optional[int] = None

    @property
    def spread(self) -> int:
        return max(self.boundaries) - min(self.boundaries)

    def to_json(self) -> str:
        heads = [
            {"boundary": b, "forced": f, "scanned": s}
            for b, f, s in zip(self.boundaries, self.forced, self.scanned)
        ]
        return json.dumps(
            {"step": self.step, "token": self.token, "heads": heads, "spread": self.spread},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        d = json.loads(line)
        heads = d["heads"]
        return cls(
            step=d["step"],
            boundaries=tuple(h["boundary"] for h in heads),
            forced=tuple(h["forced"] for h in heads),
            scanned=tuple(h.get("scanned", 0) for h in heads),
            token=d["token"],
        )


@dataclass
class DecodeTrace:
    steps: list = field(default_factory=list)
    termination: str = "max_len"

    @property
    def tokens(self) -> list:
        return [s.token for s in self.steps]

    def boundaries(self) -> np.ndarray:
        """``(steps, heads)`` integer array of boundaries."""
        return np.array([s.boundaries for s in self.steps], dtype=int)

    def latest_boundaries(self) -> list:
        """Boundary of the latest head at every step."""
        return [max(s.boundaries) for s in self.steps]

    def dumps(self) -> str:
        return "".join(s.to_json() + "\n" for s in self.steps)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def read(cls, path) -> "DecodeTrace":
        with open(path) as f:
            steps = [StepRecord.from_json(line) for line in f if line.strip()]
        return cls(steps=steps)


def check_trace(trace: DecodeTrace, epsilon: int) -> list:
    """List of invariant violations (spread above epsilon, boundaries moving left)."""
    problems = []
    prev = None
    for rec in trace.steps:
        if rec.spread > epsilon:
            problems.append(f"step {rec.step}: spread {rec.spread} > epsilon {epsilon}")
        if prev is not None:
            for m, (b, pb) in enumerate(zip(rec.boundaries, prev)):
                if b < pb:
                    problems.append(f"step {rec.step}: head {m} moved left {pb} -> {b}")
        prev = rec.boundaries
    return problems


def _query(p_provider, head, step, frame):
    q = float(p_provider(head, step, frame))
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"p_provider returned {q} for head {head}, step {step}, frame {frame}")
    return q


def hsd_step(
    heads: Sequence[HeadState],
    p_provider: Callable[[int, int, int], float],
    policy: DecodePolicy,
    step: int,
    T: int,
) -> Optional[StepRecord]:
    """Decide every head's boundary for one output step.

    Mutates ``heads`` (``activated``/``boundary``) and returns the step record,
    or ``None`` when no head activates before the end of the input and the
    policy is ``emit_end``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if any(h.activated for h in heads):
        raise ValueError("heads must be non-activated at the start of a step")
    M = len(heads)
    start = [max(h.prev_boundary, 1) for h in heads]
    seen = [{} for _ in range(M)]
    first = None
    t = min(start)
    while t <= T and (first is None or t <= first + policy.epsilon):
        for m, head in enumerate(heads):
            if head.activated or t < start[m]:
                continue
            q = _query(p_provider, head.head_id, step, t)
            seen[m][t] = q
            if q >= policy.threshold:
                head.activated = True
                head.boundary = t
                if first is None:
                    first = t
        t += 1

    scanned = tuple(len(s) for s in seen)
    if first is None:
        if policy.end_of_input == "emit_end":
            return None
        for head in heads:
            head.boundary = T
        return StepRecord(step, (T,) * M, (True,) * M, scanned)

    window_end = min(first + policy.epsilon, T)
    rightmost = max(h.boundary for h in heads if h.activated)
    forced = []
    for m, head in enumerate(heads):
        forced.append(not head.activated)
        if head.activated:
            continue
        pos = max(rightmost, head.prev_boundary)
        if policy.forced_position == "argmax":
            window = [t for t in range(max(start[m], first), window_end + 1)]
            if window:
                # first maximum wins ties
                pos = max(window, key=lambda t: (seen[m][t], -t))
        head.boundary = pos
    return StepRecord(step, tuple(h.boundary for h in heads), tuple(forced), scanned)


def hsd_batch(probs, prev, policy: DecodePolicy):
    """Vectorised ``hsd_step`` over a batch of independent decodes.

    ``probs`` is ``(N, M, T)`` for the current step, ``prev`` the ``(N, M)``
    previous boundaries.  Returns ``(boundaries, forced, scanned, exhausted)``;
    exhausted rows (``emit_end`` with no activation) keep their previous
    boundaries.
    """
    probs = np.asarray(probs, dtype=np.float64)
    prev = np.asarray(prev, dtype=int)
    N, M, T = probs.shape
    frames = np.arange(1, T + 1)
    start = np.maximum(prev, 1)
    hit = (probs >= policy.threshold) & (frames >= start[..., None])
    act = np.where(hit.any(-1), hit.argmax(-1) + 1, T + 1)
    first = act.min(-1)
    none = first > T
    window_end = np.minimum(first + policy.epsilon, T)
    activated = act <= window_end[:, None]
    rightmost = np.where(activated, act, 0).max(-1)
    pos = np.maximum(rightmost[:, None], prev)
    if policy.forced_position == "argmax":
        lo = np.maximum(start, first[:, None])
        in_window = (frames >= lo[..., None]) & (frames <= window_end[:, None, None])
        masked = np.where(in_window, probs, -np.inf)
        arg = masked.argmax(-1) + 1
        pos = np.where(in_window.any(-1), arg, pos)
    bounds = np.where(activated, act, pos)
    forced = ~activated
    scanned = np.where(activated, act - start + 1, np.maximum(window_end[:, None] - start + 1, 0))

    exhausted = np.zeros(N, dtype=bool)
    if none.any():
        scanned[none] = T - start[none] + 1
        forced[none] = True
        if policy.end_of_input == "emit_end":
            exhausted = none
            bounds[none] = prev[none]
        else:
            bounds[none] = T
    return bounds, forced, scanned, exhausted


def decode_sequence(
    p_provider: Callable[[int, int, int], float],
    policy: DecodePolicy,
    max_len: int,
    num_heads: int,
    T: int,
    emit: Optional[Callable[[int, tuple], int]] = None,
    end_token: Optional[int] = None,
) -> DecodeTrace:
    """Run head-synchronous decoding for up to ``max_len`` steps.

    ``emit(step, boundaries)`` produces the token for a step once its
    boundaries are known; without it tokens are ``None``.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    heads = [HeadState(m) for m in range(num_heads)]
    trace = DecodeTrace()
    for step in range(1, max_len + 1):
        rec = hsd_step(heads, p_provider, policy, step, T)
        if rec is None:
            trace.termination = "input_exhausted"
            break
        if emit is not None:
            rec.token = int(emit(step, rec.boundaries))
        trace.steps.append(rec)
        for head in heads:
            head.advance()
        if end_token is not None and rec.token == end_token:
            trace.termination = "end_token"
            break
    return trace


def matrix_provider(p):
    """``p_provider`` over an ``(M, L, T)`` array of scripted probabilities."""
    p = np.asarray(p, dtype=np.float64)
    return lambda head, step, frame: p[head, step - 1, frame - 1]


def chunk_context_inference(boundary: int, h, u_row, width: int) -> np.ndarray:
    """Softmax-weighted average of the ``width`` frames ending at ``boundary``."""
    h = np.asarray(h, dtype=np.float64)
    T = h.shape[0]
    if not 1 <= boundary <= T:
        raise ValueError(f"boundary {boundary} outside 1..{T}")
    if width < 1:
        raise ValueError(f"chunk width must be >= 1, got {width}")
    lo = max(1, boundary - width + 1)
    u = np.asarray(u_row, dtype=np.float64)[lo - 1 : boundary]
    w = np.exp(u - u.max())
    w /= w.sum()
    return w @ h[lo - 1 : boundary]
