"""Reverse-mode adjoints of the alignment calculus, plus a central-difference checker."""

from __future__ import annotations

import numpy as np

from .align import (
    check_probabilities,
    initial_alignment,
    others_product,
    previous_rows,
    remainders,
    window_sum_ahead,
    window_sum_behind,
)


def _finite(name, x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def _frame_cotangent(d_alpha):
    # the last column is 1 - sum(frames)
    return d_alpha[..., :-1] - d_alpha[..., -1:]


def alpha_adjoint(p, alpha, d_alpha, alpha0=None, return_alpha0: bool = False):
    """Gradient of a loss with respect to ``p`` given its gradient w.r.t. ``alpha``.

    ``alpha`` must be ``expected_alignment(p, alpha0)``.  The loop runs the
    running-product recurrence backwards: steps from last to first, frames
    from right to left within a step.
    """
    p = check_probabilities(p)
    alpha = _finite("alpha", alpha)
    d_alpha = _finite("d_alpha", d_alpha)
    L, T = p.shape[-2:]
    if alpha.shape[-2:] != (L, T + 1) or d_alpha.shape[-2:] != (L, T + 1):
        raise ValueError(f"shape mismatch: p {p.shape}, alpha {alpha.shape}, d_alpha {d_alpha.shape}")
    a0 = initial_alignment(T, alpha0)
    batch = np.broadcast_shapes(p.shape[:-2], alpha.shape[:-2], d_alpha.shape[:-2])

    g = np.broadcast_to(_frame_cotangent(d_alpha), batch + (L, T)).copy()
    d_p = np.zeros(batch + (L, T))
    carried = np.empty(batch + (T,))
    d_prev = np.empty(batch + (T,))
    for i in range(L - 1, -1, -1):
        prev = alpha[..., i - 1, :T] if i > 0 else a0
        prev = np.broadcast_to(prev, batch + (T,))
        pr = p[..., i, :]
        carried[..., 0] = prev[..., 0]
        for j in range(1, T):
            carried[..., j] = carried[..., j - 1] * (1.0 - pr[..., j - 1]) + prev[..., j]

        flow = np.zeros(batch)
        for j in range(T - 1, -1, -1):
            d_c = g[..., i, j] * pr[..., j] + flow
            d_p[..., i, j] += g[..., i, j] * carried[..., j]
            d_prev[..., j] = d_c
            if j > 0:
                d_p[..., i, j - 1] -= d_c * carried[..., j - 1]
                flow = d_c * (1.0 - pr[..., j - 1])
        if i > 0:
            g[..., i - 1, :] += d_prev
    if return_alpha0:
        return d_p, _unbroadcast(d_prev, a0.shape)
    return d_p


def _unbroadcast(x, shape):
    """Sum ``x`` down to ``shape`` after broadcasting."""
    lead = x.ndim - len(shape)
    x = x.sum(tuple(range(lead))) if lead else x
    axes = tuple(n for n, s in enumerate(shape) if s == 1 and x.shape[n] != 1)
    return x.sum(axes, keepdims=True) if axes else x.copy()


def _remainder_to_frames(d_B):
    # B[x] = 1 - sum_{k < x} frames[k]  ->  d_frames[k] = -sum_{x > k} d_B[x]
    tail = d_B[..., 1:]
    return -np.flip(np.cumsum(np.flip(tail, -1), -1), -1)


def self_constrained_adjoint(alpha, epsilon: int, d_gamma) -> np.ndarray:
    """Pull a cotangent on the self-constrained alignment back to ``alpha``.

    The no-selection column of ``alpha`` is not read by the forward pass, so its
    cotangent is zero.
    """
    alpha = _finite("alpha", alpha)
    g = _finite("d_gamma", d_gamma)
    if g.shape != alpha.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {alpha.shape}")
    e = int(epsilon)
    F = alpha[..., :-1]
    T = F.shape[-1]
    B = remainders(F)
    A_prev, B_prev = previous_rows(F, B)

    d_F = np.zeros_like(F)
    d_B = np.zeros_like(B)
    d_Ap = np.zeros_like(F)
    d_Bp = np.zeros_like(B)
    k = min(e, T)
    d_F[..., :k] += g[..., :k]
    if e < T:
        j = np.arange(e, T)
        gj = g[..., j]
        d_F[..., j] += gj * B_prev[..., j + 1 - e]
        d_Bp[..., j + 1 - e] += gj * F[..., j]
        d_B[..., j] += gj * A_prev[..., j - e]
        d_Ap[..., j - e] += gj * B[..., j]
    x = max(T - e, 0)
    d_B[..., T] += g[..., T] * B_prev[..., x]
    d_Bp[..., x] += g[..., T] * B[..., T]

    d_B[..., :-1, :] += d_Bp[..., 1:, :]
    d_F[..., :-1, :] += d_Ap[..., 1:, :]
    d_F += _remainder_to_frames(d_B)
    out = np.zeros_like(alpha)
    out[..., :-1] = d_F
    return out


def mutually_constrained_adjoint(alphas, epsilon: int, d_delta) -> np.ndarray:
    """Pull a cotangent on the mutually constrained alignments back to ``alphas``."""
    alphas = _finite("alphas", alphas)
    g = _finite("d_delta", d_delta)
    if g.shape != alphas.shape or alphas.ndim < 3:
        raise ValueError(f"shape mismatch: {g.shape} vs {alphas.shape}")
    e = int(epsilon)
    F = alphas[..., :-1]
    T = F.shape[-1]
    M = F.shape[-3]
    B = remainders(F)
    Q = others_product(B)

    d_F = np.zeros_like(F)
    d_B = np.zeros_like(B)
    d_Q = np.zeros_like(Q)
    k = min(e, T)
    d_F[..., :k] += g[..., :k]
    if e < T:
        j = np.arange(e, T)
        gj = g[..., j]
        d_F[..., j] += gj * Q[..., j + 1 - e]
        d_Q[..., j + 1 - e] += gj * (F[..., j] - B[..., j])
        d_B[..., j] += gj * (Q[..., j - e] - Q[..., j + 1 - e])
        d_Q[..., j - e] += gj * B[..., j]
    x = max(T - e, 0)
    d_B[..., T] += g[..., T] * Q[..., x]
    d_Q[..., x] += g[..., T] * B[..., T]

    # Q[m] = prod_{m' != m} B[m']
    for m in range(M):
        for mm in range(M):
            if mm == m:
                continue
            rest = np.ones_like(B[..., 0, :, :])
            for k2 in range(M):
                if k2 not in (m, mm):
                    rest = rest * B[..., k2, :, :]
            d_B[..., mm, :, :] += d_Q[..., m, :, :] * rest

    d_F += _remainder_to_frames(d_B)
    out = np.zeros_like(alphas)
    out[..., :-1] = d_F
    return out


def constrained_adjoint(alphas, cfg, d_out) -> np.ndarray:
    if cfg.mode == "self_constrained":
        return self_constrained_adjoint(alphas, cfg.epsilon, d_out)
    return mutually_constrained_adjoint(alphas, cfg.epsilon, d_out)


def chunk_attention_adjoint(weights, energies, width: int, d_beta):
    """Gradients of chunk attention w.r.t. the alignment weights and the chunk energies."""
    a = _finite("weights", weights)
    u = _finite("energies", energies)
    d_beta = _finite("d_beta", d_beta)
    if width == 1:
        return d_beta.copy(), np.zeros_like(d_beta)
    E = np.exp(u - u.max(axis=-1, keepdims=True))
    S = window_sum_behind(E, width)
    ahead = window_sum_ahead(a / S, width)

    d_E = d_beta * ahead
    d_R = window_sum_behind(d_beta * E, width)
    d_a = d_R / S
    d_S = -d_R * a / (S * S)
    d_E += window_sum_ahead(d_S, width)
    return d_a, d_E * E


# Central differences in float64 carry ~1e-11 absolute noise for O(1) losses,
# which swamps gradient entries near the 1e-8 relative-error floor.
FD_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < 1e-18 else np.float64


def numeric_gradient(forward, params, step: float = 1e-5, dtype=FD_DTYPE) -> np.ndarray:
    """Central differences of a scalar ``forward`` at every coordinate of ``params``.

    ``forward`` receives an array of ``dtype``; the kernels in :mod:`mcmma.align`
    and the toy model preserve extended precision, so the default evaluates
    the differences with a 64-bit mantissa where the platform offers one.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(params, dtype=dtype)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    h = dtype(step)
    for n in range(flat.size):
        orig = flat[n]
        flat[n] = orig + h
        fp = forward(x)
        flat[n] = orig - h
        fm = forward(x)
        flat[n] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"forward returned a non-finite value at coordinate {n}")
        # divide by the step actually taken, which rounding may have changed
        gflat[n] = float((fp - fm) / ((orig + h) - (orig - h)))
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_diff_check(forward, params, analytic, step: float = 1e-5, dtype=FD_DTYPE) -> float:
    """Max relative error between ``analytic`` and central differences of ``forward``.

    The error at each coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    return relative_error(analytic, numeric_gradient(forward, params, step, dtype))
