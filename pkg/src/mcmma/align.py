"""Expected-alignment calculus for monotonic multihead attention.

All kernels accept arbitrary leading batch dimensions.  Selection
probabilities are ``(..., L, T)`` arrays (output steps by encoder frames).
Alignments are ``(..., L, T + 1)`` arrays whose last column is the
probability that the head selects no frame at that step.  Multihead inputs
put the head axis directly before the step axis: ``(..., M, L, T + 1)``.

Frames are numbered from 1 in the docstrings and from 0 in the arrays.
Remainders ``B`` are stored over ``x = 0..T`` with ``B[..., 0] == 1``, which
encodes the convention that the remainder at any index <= 0 is one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CUMPROD_FLOOR = 1e-30
SUM_TOL = 1e-9

MODES = ("self_constrained", "mutually_constrained")


@dataclass(frozen=True)
class ConstraintConfig:
    epsilon: int
    num_heads: int = 1
    mode: str = "mutually_constrained"

    def __post_init__(self):
        if int(self.epsilon) != self.epsilon or self.epsilon < 0:
            raise ValueError(f"epsilon must be a non-negative integer, got {self.epsilon!r}")
        if self.num_heads < 1:
            raise ValueError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.mode not in MODES:
            raise ValueError(f"unknown constraint mode {self.mode!r}")


def as_float(x) -> np.ndarray:
    """float64 array, or extended precision if that is what came in."""
    x = np.asarray(x)
    if x.dtype == np.longdouble:
        return x
    return x.astype(np.float64)


def check_probabilities(p) -> np.ndarray:
    p = as_float(p)
    if p.ndim < 2 or p.shape[-1] < 1 or p.shape[-2] < 1:
        raise ValueError(f"selection probabilities must be (..., L, T) with L, T >= 1, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("selection probabilities contain non-finite values")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("selection probabilities must lie in [0, 1]")
    return p


def initial_alignment(T: int, alpha0=None) -> np.ndarray:
    """Row used in place of step 0; one-hot at frame 1 unless given."""
    if alpha0 is None:
        a0 = np.zeros(T)
        a0[0] = 1.0
        return a0
    a0 = as_float(alpha0)
    if a0.shape[-1] != T:
        raise ValueError(f"alpha0 has {a0.shape[-1]} frames, expected {T}")
    if not np.all(np.isfinite(a0)) or a0.min() < 0.0:
        raise ValueError("alpha0 entries must be finite and non-negative")
    if np.any(a0.sum(-1) > 1.0 + SUM_TOL):
        raise ValueError("alpha0 mass exceeds 1")
    return a0


def _step_direct(p_row, prev):
    # O(T^2): sum over every start frame k of the probability of skipping k..j-1
    T = p_row.shape[-1]
    dt = np.result_type(p_row, prev)
    row = np.zeros(np.broadcast_shapes(p_row.shape, prev.shape), dtype=dt)
    for j in range(T):
        acc = np.zeros(row.shape[:-1], dtype=dt)
        for k in range(j + 1):
            skip = np.ones(row.shape[:-1], dtype=dt)
            for l in range(k, j):
                skip = skip * (1.0 - p_row[..., l])
            acc = acc + prev[..., k] * skip
        row[..., j] = p_row[..., j] * acc
    return row


def _step_scan(p_row, prev):
    # carried[j] = sum_k prev[k] * prod_{l=k}^{j-1} (1 - p[l]); exact, no division
    T = p_row.shape[-1]
    row = np.empty(np.broadcast_shapes(p_row.shape, prev.shape), dtype=np.result_type(p_row, prev))
    carried = np.broadcast_to(prev[..., 0], row.shape[:-1]).copy()
    row[..., 0] = p_row[..., 0] * carried
    for j in range(1, T):
        carried = carried * (1.0 - p_row[..., j - 1]) + prev[..., j]
        row[..., j] = p_row[..., j] * carried
    return row


def _step_cumprod(p_row, prev):
    skip = np.cumprod(1.0 - p_row, axis=-1)
    excl = np.concatenate([np.ones(skip.shape[:-1] + (1,), dtype=skip.dtype), skip[..., :-1]], axis=-1)
    excl = np.clip(excl, CUMPROD_FLOOR, 1.0)
    return p_row * excl * np.cumsum(prev / excl, axis=-1)


_STEPS = {"direct": _step_direct, "scan": _step_scan, "cumprod": _step_cumprod}


def expected_alignment(p, alpha0=None, method: str = "scan") -> np.ndarray:
    """Expected monotonic alignment ``alpha`` for one head.

    ``alpha[i, j] = p[i, j] * sum_{k<=j} alpha[i-1, k] * prod_{l=k}^{j-1} (1 - p[i, l])``
    with ``alpha[0] = alpha0`` (one-hot at frame 1 by default).  The last
    column is ``1 - sum_j alpha[i, j]``.

    ``method`` picks the evaluation strategy: ``"direct"`` is the quadratic
    reference loop, ``"cumprod"`` the vectorised cumulative-product form
    (products floored at 1e-30), ``"scan"`` an exact linear-time running
    recurrence.  All three compute the same quantity.
    """
    p = check_probabilities(p)
    try:
        step = _STEPS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(_STEPS)}") from None
    L, T = p.shape[-2:]
    prev = initial_alignment(T, alpha0)
    out = np.empty(np.broadcast_shapes(p.shape[:-2], prev.shape[:-1]) + (L, T + 1), dtype=np.result_type(p, prev))
    for i in range(L):
        prev = step(p[..., i, :], prev)
        out[..., i, :T] = prev
    out[..., T] = 1.0 - out[..., :T].sum(-1)
    return out


def remainders(frames: np.ndarray) -> np.ndarray:
    """``B[..., x] = 1 - sum_{k<=x} frames[..., k]`` for ``x = 0..T``.

    Unclamped, so the constrained formulas telescope exactly.
    """
    frames = as_float(frames)
    B = np.empty(frames.shape[:-1] + (frames.shape[-1] + 1,), dtype=frames.dtype)
    B[..., 0] = 1.0
    B[..., 1:] = 1.0 - np.cumsum(frames, axis=-1)
    return B


def remainder_B(alignment, i: int, j: int) -> float:
    """Probability that the head has selected nothing up to frame ``j`` at step ``i``.

    Steps are 1-based; step 0 follows the convention that the remainder is 1.
    ``j <= 0`` is the empty sum.  Tiny negative rounding is clamped to 0.
    """
    a = np.asarray(alignment, dtype=np.float64)
    L, T = a.shape[-2], a.shape[-1] - 1
    if j > T:
        raise ValueError(f"frame index {j} exceeds T={T}")
    if not 0 <= i <= L:
        raise ValueError(f"step {i} out of range 0..{L}")
    if i == 0 or j <= 0:
        return 1.0
    b = 1.0 - float(np.sum(a[..., i - 1, :j]))
    if -1e-12 < b < 0.0:
        b = 0.0
    return b


def _frames(alignment):
    a = as_float(alignment)
    if a.ndim < 2 or a.shape[-1] < 2:
        raise ValueError(f"alignment must be (..., L, T+1), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("alignment contains non-finite values")
    return a[..., :-1]


def _check_epsilon(epsilon):
    if int(epsilon) != epsilon or epsilon < 0:
        raise ValueError(f"epsilon must be a non-negative integer, got {epsilon!r}")
    return int(epsilon)


def previous_rows(frames: np.ndarray, B: np.ndarray):
    """Frames and remainders of step ``i - 1``, with the step-0 convention."""
    A_prev = np.zeros_like(frames)
    A_prev[..., 1:, :] = frames[..., :-1, :]
    B_prev = np.ones_like(B)
    B_prev[..., 1:, :] = B[..., :-1, :]
    return A_prev, B_prev


def self_constrained(alpha, epsilon: int) -> np.ndarray:
    """Alignment of a head forced to select within ``epsilon`` frames of its previous boundary."""
    e = _check_epsilon(epsilon)
    frames = _frames(alpha)
    T = frames.shape[-1]
    B = remainders(frames)
    A_prev, B_prev = previous_rows(frames, B)

    out = np.empty(frames.shape[:-1] + (T + 1,), dtype=frames.dtype)
    out[..., : min(e, T)] = frames[..., : min(e, T)]
    if e < T:
        j = np.arange(e, T)  # 0-based frames e+1..T
        out[..., j] = frames[..., j] * B_prev[..., j + 1 - e] + B[..., j] * A_prev[..., j - e]
    out[..., T] = B[..., T] * B_prev[..., max(T - e, 0)]
    return out


def others_product(B: np.ndarray, head_axis: int = -3) -> np.ndarray:
    """For each head, the product of the other heads' remainders (1 for a single head)."""
    B = np.moveaxis(B, head_axis, 0)
    M = B.shape[0]
    left = np.ones_like(B)
    right = np.ones_like(B)
    for m in range(1, M):
        left[m] = left[m - 1] * B[m - 1]
        right[M - 1 - m] = right[M - m] * B[M - m]
    return np.moveaxis(left * right, 0, head_axis)


def mutually_constrained(alphas, epsilon: int) -> np.ndarray:
    """Alignments of heads that must select within ``epsilon`` frames of the earliest other head.

    ``alphas`` is ``(..., M, L, T + 1)``; the result has the same shape.  For head
    ``m`` with ``Q(x) = prod_{m' != m} B^{m'}(x)``:

    * frames ``j <= epsilon`` keep ``alpha[j]``;
    * later frames get ``alpha[j] * Q(j - eps) + B(j - 1) * (Q(j - eps - 1) - Q(j - eps))``;
    * the no-selection column is ``B(T) * Q(T - eps)``.
    """
    e = _check_epsilon(epsilon)
    frames = _frames(alphas)
    if frames.ndim < 3:
        raise ValueError("mutually constrained alignments need a head axis: (..., M, L, T+1)")
    T = frames.shape[-1]
    B = remainders(frames)
    Q = others_product(B)

    out = np.empty(frames.shape[:-1] + (T + 1,), dtype=frames.dtype)
    out[..., : min(e, T)] = frames[..., : min(e, T)]
    if e < T:
        j = np.arange(e, T)
        out[..., j] = frames[..., j] * Q[..., j + 1 - e] + B[..., j] * (Q[..., j - e] - Q[..., j + 1 - e])
    out[..., T] = B[..., T] * Q[..., max(T - e, 0)]
    return out


def constrain(alphas, cfg: ConstraintConfig) -> np.ndarray:
    alphas = as_float(alphas)
    if cfg.mode == "self_constrained":
        return self_constrained(alphas, cfg.epsilon)
    if alphas.ndim < 3 or alphas.shape[-3] != cfg.num_heads:
        raise ValueError(f"expected {cfg.num_heads} heads on axis -3, got shape {alphas.shape}")
    return mutually_constrained(alphas, cfg.epsilon)


def chunk_attention(weights, energies, width: int) -> np.ndarray:
    """Expected chunkwise attention over windows of ``width`` frames ending at each boundary.

    ``beta[j] = exp(u[j]) * sum_{k=j}^{j+w-1} a[k] / sum_{l=k-w+1}^{k} exp(u[l])``.
    ``weights`` holds alignment mass on frames only, ``(..., L, T)``.
    """
    if width < 1:
        raise ValueError(f"chunk width must be >= 1, got {width}")
    a = as_float(weights)
    u = as_float(energies)
    if a.shape[-1] != u.shape[-1]:
        raise ValueError(f"frame count mismatch: {a.shape} vs {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("chunk energies contain non-finite values")
    if width == 1:
        return np.broadcast_to(a, np.broadcast_shapes(a.shape, u.shape)).copy()
    E = np.exp(u - u.max(axis=-1, keepdims=True))
    S = window_sum_behind(E, width)
    return E * window_sum_ahead(a / S, width)


def window_sum_behind(x: np.ndarray, width: int) -> np.ndarray:
    """``out[k] = sum_{l=max(0, k-w+1)}^{k} x[l]`` along the last axis."""
    out = x.copy()
    for o in range(1, min(width, x.shape[-1])):
        out[..., o:] += x[..., :-o]
    return out


def window_sum_ahead(x: np.ndarray, width: int) -> np.ndarray:
    """``out[j] = sum_{k=j}^{min(j+w-1, T-1)} x[k]`` along the last axis."""
    out = x.copy()
    for o in range(1, min(width, x.shape[-1])):
        out[..., :-o] += x[..., o:]
    return out


def expected_context(weights, h) -> np.ndarray:
    """Weighted sum of encoder states: ``(..., L, T) @ (..., T, d)``."""
    w = as_float(weights)
    h = as_float(h)
    if h.ndim < 2 or w.shape[-1] != h.shape[-2]:
        raise ValueError(f"weights {w.shape} do not match encoder states {h.shape}")
    return w @ h
