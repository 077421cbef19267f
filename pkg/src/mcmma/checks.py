"""Verification suites shared by the ``oracle-check``/``gradcheck`` commands and the tests.

Each suite returns a list of :class:`CheckResult`; a check passes when its
measured value is at most its tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import align, grad, oracle
from .decode import DecodePolicy
from .toy import model as tm

P_MARGIN = 1e-3  # keep probabilities away from {0, 1} in gradient checks
KERNEL_TOL = 1e-5
TOY_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    cases: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.tol


class _Tracker:
    """Accumulates the worst value per check name in insertion order."""

    def __init__(self):
        self.results = {}

    def add(self, name, value, tol):
        r = self.results.setdefault(name, CheckResult(name, 0.0, tol))
        r.value = max(r.value, float(value)) if np.isfinite(value) else float("nan")
        r.cases += 1

    def timed(self, name, seconds):
        self.results[name].seconds += seconds

    def out(self):
        return list(self.results.values())


def format_table(results, value_header="max_dev") -> str:
    width = max([len(r.name) for r in results] + [9])
    lines = [f"{'check':<{width}}  {value_header:>10}  {'tol':>8}  {'cases':>6}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.value:>10.3e}  {r.tol:>8.1e}  {r.cases:>6}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def grid_probabilities(seed: int, T: int, L: int, M: int = 3) -> np.ndarray:
    """Random ``(M, L, T)`` probabilities; about one entry in eight is snapped to 0 or 1."""
    rng = np.random.default_rng([seed, T, L])
    p = rng.random((M, L, T))
    snap = rng.random(p.shape) < 0.125
    p[snap] = np.round(p[snap])
    return p


def grid_instances(seeds: int = 50, T_max: int = 8, L_max: int = 4, M_max: int = 3):
    """Yield ``(seed, T, L, p)`` with ``p`` holding ``M_max`` heads; smaller M take a prefix."""
    for seed in range(seeds):
        for T in range(1, T_max + 1):
            for L in range(1, L_max + 1):
                yield seed, T, L, grid_probabilities(seed, T, L, M_max)


def epsilons_for(T: int) -> list:
    return sorted({0, 1, 2, T})


def oracle_equivalence(seeds=50, T_max=8, L_max=4, M_max=3, tol=1e-12) -> list:
    """Enumeration vs Eq.-1 kernel and direct sums vs constrained kernels over the grid."""
    tr = _Tracker()
    for _, T, L, p in grid_instances(seeds, T_max, L_max, M_max):
        t0 = time.perf_counter()
        alphas = align.expected_alignment(p)
        for m in range(M_max):
            tr.add("alpha_vs_enumeration", np.abs(alphas[m] - oracle.alpha_by_enumeration(p[m])).max(), tol)
            tr.add("path_probability_total", abs(oracle.total_path_probability(p[m]) - 1.0), tol)
        tr.timed("alpha_vs_enumeration", time.perf_counter() - t0)
        t0 = time.perf_counter()
        for M in range(1, M_max + 1):
            a = alphas[:M]
            for eps in epsilons_for(T):
                d = align.mutually_constrained(a, eps)
                tr.add("delta_vs_direct_sum", np.abs(d - oracle.constrained_by_direct_sum(a, eps)).max(), tol)
                if M == 1:
                    g = align.self_constrained(a[0], eps)
                    ref = oracle.constrained_by_direct_sum(a, eps, mode="self_constrained")[0]
                    tr.add("gamma_vs_direct_sum", np.abs(g - ref).max(), tol)
        tr.timed("delta_vs_direct_sum", time.perf_counter() - t0)
    return tr.out()


def method_agreement(seeds=50, T_max=8, L_max=4, tol=1e-10) -> list:
    """The direct, scan and cumulative-product forms of the expected-alignment recurrence agree."""
    tr = _Tracker()
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 101])
        for T in range(1, T_max + 1):
            for L in range(1, L_max + 1):
                p = rng.uniform(P_MARGIN, 1 - P_MARGIN, size=(L, T))
                ref = align.expected_alignment(p, method="direct")
                for method in ("scan", "cumprod"):
                    got = align.expected_alignment(p, method=method)
                    tr.add(f"alpha_{method}_vs_direct", np.abs(got - ref).max(), tol)
    return tr.out()


def random_alpha0(rng, T: int) -> np.ndarray:
    """A sub-probability initial row: total mass uniform in (0, 1]."""
    w = rng.random(T)
    return w / w.sum() * (1.0 - rng.random())


def normalization(n_instances=1000, seed=0, tol=1e-9) -> list:
    """Rows of the constrained kernels sum to one, including sub-probability initial rows."""
    tr = _Tracker()
    rng = np.random.default_rng([seed, 202])
    for n in range(n_instances):
        T = int(rng.integers(1, 17))
        L = int(rng.integers(1, 7))
        M = int(rng.integers(1, 5))
        eps = int(rng.integers(0, T + 2))
        p = rng.random((M, L, T))
        alpha0 = random_alpha0(rng, T) if n % 2 else None
        alphas = align.expected_alignment(p, alpha0)
        d = align.mutually_constrained(alphas, eps)
        g = align.self_constrained(alphas, eps)
        tr.add("delta_row_sums", np.abs(d.sum(-1) - 1.0).max(), tol)
        tr.add("gamma_row_sums", np.abs(g.sum(-1) - 1.0).max(), tol)
        tr.add("nonnegativity", max(0.0, -min(d.min(), g.min())), 1e-12)
    return tr.out()


def degenerate_reductions(seeds=50, T_max=8, L_max=4, tol=1e-12) -> list:
    tr = _Tracker()
    for seed, T, L, p in grid_instances(seeds, T_max, L_max, 3):
        alphas = align.expected_alignment(p)
        for eps in epsilons_for(T) + [T + 3]:
            one = align.mutually_constrained(alphas[:1], eps)
            tr.add("delta_eq_alpha_single_head", np.abs(one - alphas[:1]).max(), tol)
        for eps in (T, T + 3):
            tr.add("delta_eq_alpha_eps_ge_T", np.abs(align.mutually_constrained(alphas, eps) - alphas).max(), tol)
            tr.add("gamma_eq_alpha_eps_ge_T", np.abs(align.self_constrained(alphas, eps) - alphas).max(), tol)
    return tr.out()


MC_HEADS = (2, 4)
MC_EPSILONS = (1, 2, 8)


def hsd_monte_carlo(n_samples=100_000, seed=0, L=6, T=16) -> list:
    """Spread and monotonicity violations of the decoder state machine on sampled decisions."""
    tr = _Tracker()
    for M in MC_HEADS:
        for eps in MC_EPSILONS:
            t0 = time.perf_counter()
            p = np.random.default_rng([seed, M, eps]).random((M, L, T))
            for n, policy in enumerate(
                (
                    DecodePolicy(eps),
                    DecodePolicy(eps, forced_position="argmax"),
                    DecodePolicy(eps, end_of_input="emit_end"),
                )
            ):
                # the default policy gets the full sample budget, the variants a tenth
                samples = n_samples if n == 0 else max(1, n_samples // 10)
                st = oracle.monte_carlo_hsd(p, policy, samples, seed=seed + n)
                tr.add("hsd_spread_violations", st.spread_violations, 0)
                tr.add("hsd_monotonic_violations", st.monotonic_violations, 0)
            tr.timed("hsd_spread_violations", time.perf_counter() - t0)
    return tr.out()


def oracle_suite(seeds=50, mc_samples=100_000, seed=0) -> list:
    return (
        oracle_equivalence(seeds)
        + method_agreement(seeds)
        + normalization(seed=seed)
        + degenerate_reductions(seeds)
        + hsd_monte_carlo(mc_samples, seed)
    )


# ---- gradient checks -------------------------------------------------------


def _kernel_instance(seed: int):
    rng = np.random.default_rng([seed, 303])
    T = int(rng.integers(1, 7))
    L = int(rng.integers(1, 4))
    M = int(rng.integers(1, 4))
    eps = int(rng.integers(0, T + 1))
    w = int(rng.integers(1, T + 1))
    p = rng.uniform(P_MARGIN, 1 - P_MARGIN, size=(M, L, T))
    return rng, T, L, M, eps, w, p


def _quadratic(c):
    """``f(x) = sum(c * x + x**2)`` and its gradient."""
    return (lambda x: np.sum(c * x + x * x)), (lambda x: c + 2.0 * x)


def kernel_gradients(seeds=20, tol=KERNEL_TOL, step=1e-5) -> list:
    tr = _Tracker()
    for seed in range(seeds):
        rng, T, L, M, eps, w, p = _kernel_instance(seed)
        alphas = align.expected_alignment(p)

        f, df = _quadratic(rng.normal(size=alphas.shape))
        a0 = random_alpha0(rng, T)
        alpha_a0 = align.expected_alignment(p, a0)
        d_p, d_a0 = grad.alpha_adjoint(p, alpha_a0, df(alpha_a0), a0, return_alpha0=True)
        tr.add("alpha_adjoint_p", grad.finite_diff_check(lambda x: f(align.expected_alignment(x, a0)), p, d_p, step), tol)
        tr.add("alpha_adjoint_alpha0", grad.finite_diff_check(lambda x: f(align.expected_alignment(p, x)), a0, d_a0, step), tol)

        f, df = _quadratic(rng.normal(size=alphas.shape))
        d = grad.mutually_constrained_adjoint(alphas, eps, df(align.mutually_constrained(alphas, eps)))
        fd = grad.finite_diff_check(lambda x: f(align.mutually_constrained(x, eps)), alphas, d, step)
        tr.add("mutually_constrained_adjoint", fd, tol)

        d = grad.self_constrained_adjoint(alphas, eps, df(align.self_constrained(alphas, eps)))
        tr.add("self_constrained_adjoint", grad.finite_diff_check(lambda x: f(align.self_constrained(x, eps)), alphas, d, step), tol)

        frames = alphas[..., :T]
        u = rng.normal(size=frames.shape)
        f, df = _quadratic(rng.normal(size=frames.shape))
        d_a, d_u = grad.chunk_attention_adjoint(frames, u, w, df(align.chunk_attention(frames, u, w)))
        tr.add("chunk_attention_weights", grad.finite_diff_check(lambda x: f(align.chunk_attention(x, u, w)), frames, d_a, step), tol)
        tr.add("chunk_attention_energies", grad.finite_diff_check(lambda x: f(align.chunk_attention(frames, x, w)), u, d_u, step), tol)

        h = rng.normal(size=(T, 3))
        c = rng.normal(size=(M, L, 3))
        tr.add("expected_context_weights", grad.finite_diff_check(lambda x: np.sum(c * align.expected_context(x, h)), frames, c @ h.T, step), tol)
        tr.add("expected_context_states", grad.finite_diff_check(lambda x: np.sum(c * align.expected_context(frames, x)), h, np.einsum("mld,mlt->td", c, frames), step), tol)

        def pipeline(pp, uu):
            delta = align.mutually_constrained(align.expected_alignment(pp), eps)
            return np.sum(c * align.expected_context(align.chunk_attention(delta[..., :T], uu, w), h))

        delta = align.mutually_constrained(alphas, eps)
        d_beta = c @ h.T
        d_delta_frames, d_u = grad.chunk_attention_adjoint(delta[..., :T], u, w, d_beta)
        d_delta = np.concatenate([d_delta_frames, np.zeros(alphas.shape[:-1] + (1,))], -1)
        d_alpha = grad.mutually_constrained_adjoint(alphas, eps, d_delta)
        d_p = grad.alpha_adjoint(p, alphas, d_alpha)
        tr.add("pipeline_p", grad.finite_diff_check(lambda x: pipeline(x, u), p, d_p, step), tol)
        tr.add("pipeline_chunk_energies", grad.finite_diff_check(lambda x: pipeline(p, x), u, d_u, step), tol)

        # adjoints are linear in their cotangent
        d1, d2 = rng.normal(size=alphas.shape), rng.normal(size=alphas.shape)
        a, b = rng.normal(size=2)
        for name, adj in (
            ("alpha", lambda d: grad.alpha_adjoint(p, alphas, d)),
            ("delta", lambda d: grad.mutually_constrained_adjoint(alphas, eps, d)),
            ("gamma", lambda d: grad.self_constrained_adjoint(alphas, eps, d)),
        ):
            lhs = adj(a * d1 + b * d2)
            rhs = a * adj(d1) + b * adj(d2)
            tr.add("adjoint_linearity", np.abs(lhs - rhs).max() / max(1.0, np.abs(rhs).max()), 1e-12)
    return tr.out()


TOY_GRAD_CONFIG = tm.ToyConfig(vocab_size=5, T=8, L=2, d_in=3, d_model=4, num_heads=2, chunk_width=3)
TOY_GRAD_EPSILON = 2


def toy_gradient_error(seed: int, mode: str, cfg: tm.ToyConfig = TOY_GRAD_CONFIG, epsilon=TOY_GRAD_EPSILON, step=1e-5) -> float:
    """Worst relative error over every parameter group of the toy model on one tiny batch."""
    rng = np.random.default_rng([seed, 404])
    params = tm.init_params(cfg, seed)
    for v in params.named().values():
        v += 0.1 * rng.normal(size=v.shape)
    x = rng.normal(size=(2, cfg.T, cfg.d_in))
    y = rng.integers(0, cfg.vocab_size, size=(2, cfg.L))
    mask = np.array([[True, True], [True, False]])[:, : cfg.num_heads]
    _, grads, _ = tm.loss_and_grad(params, cfg, x, y, mode, epsilon, mask)
    hi = params.astype(grad.FD_DTYPE)
    worst = 0.0
    for name, value in hi.named().items():

        def loss(v, name=name):
            trial = tm.ToyModelParams(**{**hi.named(), name: v})
            logits, _ = tm.forward(trial, cfg, x, y, mode, epsilon, mask)
            return tm.cross_entropy(logits, y)[0]

        worst = max(worst, grad.finite_diff_check(loss, value, getattr(grads, name), step))
    return worst


def toy_gradients(seeds=20, tol=TOY_TOL, modes=tm.MODES) -> list:
    tr = _Tracker()
    for seed in range(seeds):
        for mode in modes:
            t0 = time.perf_counter()
            tr.add(f"toy_end_to_end_{mode}", toy_gradient_error(seed, mode), tol)
            tr.timed(f"toy_end_to_end_{mode}", time.perf_counter() - t0)
    return tr.out()


def grad_suite(seeds=20) -> list:
    return kernel_gradients(seeds) + toy_gradients(seeds)
