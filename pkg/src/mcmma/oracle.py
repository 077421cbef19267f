"""Brute-force references for the alignment calculus and the decoding state machine.

Nothing here shares code with :mod:`mcmma.align`; the point is to have a
second, literal route to every quantity.  Everything is plain Python loops
over floats, so keep instances small.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .decode import DecodePolicy, hsd_batch

MAX_ENUM_T = 10
MAX_ENUM_L = 5
MAX_DIRECT_T = 12


@dataclass(frozen=True)
class MonotonicPath:
    """Hard boundaries for every step; ``None`` marks no selection."""

    boundaries: tuple
    probability: float


def _as_rows(x):
    return [[float(v) for v in row] for row in np.asarray(x, dtype=np.float64)]


def enumerate_paths(p, alpha0=None) -> Iterator[MonotonicPath]:
    """Every hard selection path of one head together with its probability.

    The path starts at a frame drawn from ``alpha0`` (one-hot at frame 1 by
    default).  At step ``i`` the head inspects frames upward from its last
    boundary, inclusive, selecting frame ``j`` with probability
    ``p[i][j] * prod(1 - p[i][l])`` over the skipped frames.  Missing mass in
    ``alpha0`` and running off the end both produce ``None`` forever after.
    """
    rows = _as_rows(p)
    L, T = len(rows), len(rows[0])
    if T > MAX_ENUM_T or L > MAX_ENUM_L:
        raise ValueError(f"instance too large for enumeration (T={T}, L={L})")
    if alpha0 is None:
        start = [1.0] + [0.0] * (T - 1)
    else:
        start = [float(v) for v in alpha0]

    def walk(i, pos, prob, prefix):
        if i == L:
            yield MonotonicPath(tuple(prefix), prob)
            return
        if pos is None:
            yield from walk(i + 1, None, prob, prefix + [None])
            return
        skip = 1.0
        for j in range(pos, T + 1):
            take = skip * rows[i][j - 1]
            yield from walk(i + 1, j, prob * take, prefix + [j])
            skip *= 1.0 - rows[i][j - 1]
        yield from walk(i + 1, None, prob * skip, prefix + [None])

    for k in range(1, T + 1):
        if start[k - 1] > 0.0:
            yield from walk(0, k, start[k - 1], [])
    missing = 1.0 - sum(start)
    if missing > 0.0:
        yield from walk(0, None, missing, [])


def alpha_by_enumeration(p, alpha0=None) -> np.ndarray:
    """Per-step boundary marginals of :func:`enumerate_paths`, shape ``(L, T + 1)``."""
    rows = _as_rows(p)
    L, T = len(rows), len(rows[0])
    out = np.zeros((L, T + 1))
    for path in enumerate_paths(p, alpha0):
        for i, b in enumerate(path.boundaries):
            out[i, T if b is None else b - 1] += path.probability
    return out


def total_path_probability(p, alpha0=None) -> float:
    return sum(path.probability for path in enumerate_paths(p, alpha0))


def _B(rows, i, x):
    """Remainder of step ``i`` (0-based rows, -1 is the virtual step 0) at frame ``x``."""
    if i < 0 or x <= 0:
        return 1.0
    total = 0.0
    for k in range(1, x + 1):
        total += rows[i][k - 1]
    return 1.0 - total


def _A(rows, i, x):
    if i < 0 or x <= 0:
        return 0.0
    return rows[i][x - 1]


def constrained_by_direct_sum(alphas, epsilon: int, mode: str = "mutually_constrained") -> np.ndarray:
    """Constrained alignments evaluated term by term.

    ``alphas`` is ``(M, L, T + 1)``.  For ``mode="self_constrained"`` every head is
    treated on its own against its previous step.
    """
    if mode not in ("mutually_constrained", "self_constrained"):
        raise ValueError(f"unknown mode {mode!r}")
    heads = [_as_rows(a) for a in np.asarray(alphas, dtype=np.float64)]
    M, L, T = len(heads), len(heads[0]), len(heads[0][0]) - 1
    if T > MAX_DIRECT_T:
        raise ValueError(f"instance too large for the direct-sum oracle (T={T})")
    out = np.zeros((M, L, T + 1))
    for m in range(M):
        a = heads[m]
        for i in range(L):
            if mode == "self_constrained":
                def gate(x):
                    return _B(a, i - 1, x)

                def gate_prev(x):
                    return _A(a, i - 1, x)
            else:
                def gate(x):
                    prod = 1.0
                    for mm in range(M):
                        if mm != m:
                            prod *= _B(heads[mm], i, x)
                    return prod

                def gate_prev(x):
                    return gate(x - 1) - gate(x)

            for j in range(1, T + 1):
                if j <= epsilon:
                    out[m, i, j - 1] = _A(a, i, j)
                else:
                    out[m, i, j - 1] = _A(a, i, j) * gate(j - epsilon) + _B(a, i, j - 1) * gate_prev(j - epsilon)
            out[m, i, T] = _B(a, i, T) * gate(T - epsilon)
    return out


@dataclass
class MonteCarloStats:
    n_samples: int
    mean_boundary: np.ndarray  # (M, L), over samples that reached the step
    spread_histogram: np.ndarray  # counts of per-sample max spread, index = spread
    spread_violations: int
    monotonic_violations: int
    frequencies: np.ndarray  # (M, L, T + 1) empirical boundary frequencies
    divergence: Optional[float] = None  # max |frequency - reference|, documentation only


def monte_carlo_hsd(
    p,
    policy: DecodePolicy,
    n_samples: int,
    seed: int,
    chunk: int = 20000,
    reference=None,
) -> MonteCarloStats:
    """Run the batched head-synchronous state machine on sampled hard decisions.

    ``p`` is ``(M, L, T)``.  Decisions ``z ~ Bernoulli(p)`` are drawn per head,
    step and frame; the decoder sees ``z`` as its probabilities.  Exhausted
    decodes (``emit_end``) stop contributing from that step on.
    ``reference`` optionally supplies ``(M, L, T + 1)`` alignments to compare
    the empirical frequencies against.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3 or p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("p must be an (M, L, T) array of probabilities")
    M, L, T = p.shape
    rng = np.random.default_rng(seed)
    hist = np.zeros(T, dtype=np.int64)
    counts = np.zeros((M, L, T + 1))
    sums = np.zeros((M, L))
    alive_total = np.zeros(L)
    spread_bad = mono_bad = 0

    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        z = rng.random((n, M, L, T)) < p
        prev = np.zeros((n, M), dtype=int)
        alive = np.ones(n, dtype=bool)
        worst = np.zeros(n, dtype=int)
        for i in range(L):
            b, _, _, exhausted = hsd_batch(z[:, :, i, :].astype(np.float64), prev, policy)
            alive &= ~exhausted
            spread = b.max(-1) - b.min(-1)
            spread_bad += int(np.sum(alive & (spread > policy.epsilon)))
            mono_bad += int(np.sum(alive[:, None] & (b < prev)))
            worst = np.where(alive, np.maximum(worst, spread), worst)
            live = b[alive]
            sums[:, i] += live.sum(0)
            alive_total[i] += live.shape[0]
            for m in range(M):
                counts[m, i, :T] += np.bincount(live[:, m] - 1, minlength=T)
            prev = np.where(alive[:, None], b, prev)
        hist += np.bincount(worst, minlength=T)[:T]
        done += n

    counts[..., T] = n_samples - counts[..., :T].sum(-1)
    freq = counts / n_samples
    with np.errstate(invalid="ignore"):
        mean = sums / alive_total
    div = None
    if reference is not None:
        div = float(np.abs(freq - np.asarray(reference)).max())
    return MonteCarloStats(n_samples, mean, hist, spread_bad, mono_bad, freq, div)
