"""A tiny encoder/decoder whose decoder-encoder attention is monotonic chunkwise multihead attention.

Encoder: ``h_t = tanh(W_in x_t + b_in + P_enc[t])``.
Decoder state: ``s_i = tanh(W_s (E[y_{i-1}] + P_dec[i]) + b_s)`` from the previous gold token.
Head ``m``: selection energies ``(W_q s)(W_k h) / sqrt(d) + b``, chunk energies
``(W_cq s)(W_ck h) / sqrt(d)``; expected alignments (optionally constrained)
feed chunk attention, the per-head contexts are averaged over surviving heads
and projected to token logits.

Every function keeps the dtype of the parameters, so the whole forward pass can
run in extended precision for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .. import align, grad
from ..decode import chunk_context_inference

MODES = ("mma", "mcmma_delta", "mcmma_gamma")


@dataclass(frozen=True)
class ToyConfig:
    vocab_size: int = 10
    T: int = 32
    L: int = 8
    d_in: int = 8
    d_model: int = 16
    num_heads: int = 2
    chunk_width: int = 4

    @property
    def bos(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ToyModelParams:
    W_in: np.ndarray
    b_in: np.ndarray
    P_enc: np.ndarray
    E_dec: np.ndarray
    P_dec: np.ndarray
    W_s: np.ndarray
    b_s: np.ndarray
    W_q: np.ndarray
    W_k: np.ndarray
    b_mono: np.ndarray
    W_cq: np.ndarray
    W_ck: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray

    def named(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ToyModelParams":
        return ToyModelParams(**{k: v.copy() for k, v in self.named().items()})

    def astype(self, dtype) -> "ToyModelParams":
        return ToyModelParams(**{k: v.astype(dtype) for k, v in self.named().items()})


def init_params(cfg: ToyConfig, seed: int) -> ToyModelParams:
    rng = np.random.default_rng(seed)
    d, M, V = cfg.d_model, cfg.num_heads, cfg.vocab_size

    def dense(*shape):
        return rng.normal(scale=1.0 / np.sqrt(shape[-1]), size=shape)

    return ToyModelParams(
        W_in=dense(d, cfg.d_in),
        b_in=np.zeros(d),
        P_enc=rng.normal(scale=0.5, size=(cfg.T, d)),
        E_dec=rng.normal(scale=0.5, size=(V + 1, d)),
        P_dec=rng.normal(scale=0.5, size=(cfg.L, d)),
        W_s=dense(d, d),
        b_s=np.zeros(d),
        W_q=dense(M, d, d),
        W_k=dense(M, d, d),
        b_mono=np.zeros(M),
        W_cq=dense(M, d, d),
        W_ck=dense(M, d, d),
        W_o=dense(V, d),
        b_o=np.zeros(V),
    )


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def headdrop_mask(M: int, p_drop: float, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """``(n, M)`` keep-mask.  Each head drops with ``p_drop``; an all-dropped row
    gets one uniformly chosen head back."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must lie in [0, 1), got {p_drop}")
    if p_drop == 0.0:
        return np.ones((n, M), dtype=bool)
    keep = rng.random((n, M)) >= p_drop
    empty = ~keep.any(-1)
    if empty.any():
        keep[np.flatnonzero(empty), rng.integers(0, M, size=int(empty.sum()))] = True
    return keep


def decoder_inputs(cfg: ToyConfig, targets: np.ndarray) -> np.ndarray:
    y = np.asarray(targets)
    return np.concatenate([np.full(y.shape[:-1] + (1,), cfg.bos), y[..., :-1]], axis=-1)


def constrain_alignment(alpha, mode: str, epsilon: int):
    if mode == "mma":
        return alpha
    if mode == "mcmma_delta":
        return align.mutually_constrained(alpha, epsilon)
    if mode == "mcmma_gamma":
        return align.self_constrained(alpha, epsilon)
    raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")


def constrain_adjoint(alpha, mode: str, epsilon: int, d_out):
    if mode == "mma":
        return d_out
    if mode == "mcmma_delta":
        return grad.mutually_constrained_adjoint(alpha, epsilon, d_out)
    return grad.self_constrained_adjoint(alpha, epsilon, d_out)


def _require_finite(values, energy):
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(energy))
        where = f" (first non-finite energy at batch/head/step/frame {tuple(bad[0])})" if len(bad) else ""
        raise FloatingPointError("non-finite activations in toy forward" + where)


def forward(
    params: ToyModelParams,
    cfg: ToyConfig,
    inputs,
    targets,
    mode: str = "mma",
    epsilon: int = 0,
    head_mask=None,
    energy_noise=None,
):
    """Teacher-forced forward pass.

    Returns ``(logits, cache)``; ``cache["weights"]`` holds the per-head
    attention weights actually used, ``(B, M, L, T)``.
    """
    P = params
    x = np.asarray(inputs, dtype=P.W_in.dtype)
    B = x.shape[0]
    scale = 1.0 / np.sqrt(cfg.d_model)

    h = np.tanh(x @ P.W_in.T + P.b_in + P.P_enc)
    y_prev = decoder_inputs(cfg, targets)
    emb = P.E_dec[y_prev] + P.P_dec
    s = np.tanh(emb @ P.W_s.T + P.b_s)

    q = np.einsum("bld,mkd->bmlk", s, P.W_q)
    k = np.einsum("btd,mkd->bmtk", h, P.W_k)
    energy = np.einsum("bmlk,bmtk->bmlt", q, k) * scale + P.b_mono[:, None, None]
    if energy_noise is not None:
        energy = energy + energy_noise
    _require_finite(energy, energy)
    p = sigmoid(energy)
    alpha = align.expected_alignment(p)
    weights = constrain_alignment(alpha, mode, epsilon)[..., : cfg.T]

    cq = np.einsum("bld,mkd->bmlk", s, P.W_cq)
    ck = np.einsum("btd,mkd->bmtk", h, P.W_ck)
    u = np.einsum("bmlk,bmtk->bmlt", cq, ck) * scale
    beta = align.chunk_attention(weights, u, cfg.chunk_width)
    ctx = np.einsum("bmlt,btd->bmld", beta, h)

    keep = np.ones((B, cfg.num_heads), dtype=bool) if head_mask is None else np.asarray(head_mask, dtype=bool)
    omega = keep / keep.sum(-1, keepdims=True)
    c = np.einsum("bm,bmld->bld", omega.astype(ctx.dtype), ctx)
    logits = c @ P.W_o.T + P.b_o

    _require_finite(logits, energy)

    cache = dict(
        x=x, h=h, y_prev=y_prev, emb=emb, s=s, q=q, k=k, p=p, alpha=alpha, weights=weights,
        cq=cq, ck=ck, u=u, beta=beta, ctx=ctx, omega=omega, c=c, mode=mode, epsilon=epsilon,
    )
    return logits, cache


def log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean token negative log-likelihood and its gradient w.r.t. the logits."""
    lsm = log_softmax(logits)
    t = np.asarray(targets)
    n = t.size
    nll = -np.take_along_axis(lsm, t[..., None], -1).sum() / n
    d = np.exp(lsm)
    np.put_along_axis(d, t[..., None], np.take_along_axis(d, t[..., None], -1) - 1.0, -1)
    return nll, d / n


def backward(params: ToyModelParams, cfg: ToyConfig, cache: dict, d_logits) -> ToyModelParams:
    """Gradients of a loss w.r.t. every parameter, given ``d loss / d logits``."""
    P = params
    C = cache
    scale = 1.0 / np.sqrt(cfg.d_model)
    h, s = C["h"], C["s"]

    g = {}
    g["W_o"] = np.einsum("blv,bld->vd", d_logits, C["c"])
    g["b_o"] = d_logits.sum((0, 1))
    d_c = d_logits @ P.W_o
    d_ctx = C["omega"][:, :, None, None] * d_c[:, None]

    d_beta = np.einsum("bmld,btd->bmlt", d_ctx, h)
    d_h = np.einsum("bmlt,bmld->btd", C["beta"], d_ctx)
    d_w, d_u = grad.chunk_attention_adjoint(C["weights"], C["u"], cfg.chunk_width, d_beta)

    d_u = d_u * scale
    d_cq = np.einsum("bmlt,bmtk->bmlk", d_u, C["ck"])
    d_ck = np.einsum("bmlt,bmlk->bmtk", d_u, C["cq"])
    g["W_cq"] = np.einsum("bmlk,bld->mkd", d_cq, s)
    g["W_ck"] = np.einsum("bmtk,btd->mkd", d_ck, h)
    d_s = np.einsum("bmlk,mkd->bld", d_cq, P.W_cq)
    d_h = d_h + np.einsum("bmtk,mkd->btd", d_ck, P.W_ck)

    alpha = C["alpha"]
    d_constrained = np.zeros_like(alpha)
    d_constrained[..., : cfg.T] = d_w
    d_alpha = constrain_adjoint(alpha, C["mode"], C["epsilon"], d_constrained)
    d_p = grad.alpha_adjoint(C["p"], alpha, d_alpha)
    d_e = d_p * C["p"] * (1.0 - C["p"])

    g["b_mono"] = d_e.sum((0, 2, 3))
    d_e = d_e * scale
    d_q = np.einsum("bmlt,bmtk->bmlk", d_e, C["k"])
    d_k = np.einsum("bmlt,bmlk->bmtk", d_e, C["q"])
    g["W_q"] = np.einsum("bmlk,bld->mkd", d_q, s)
    g["W_k"] = np.einsum("bmtk,btd->mkd", d_k, h)
    d_s = d_s + np.einsum("bmlk,mkd->bld", d_q, P.W_q)
    d_h = d_h + np.einsum("bmtk,mkd->btd", d_k, P.W_k)

    d_zs = d_s * (1.0 - s * s)
    g["W_s"] = np.einsum("blk,bld->kd", d_zs, C["emb"])
    g["b_s"] = d_zs.sum((0, 1))
    d_emb = d_zs @ P.W_s
    g["P_dec"] = d_emb.sum(0)
    g["E_dec"] = np.zeros_like(P.E_dec)
    np.add.at(g["E_dec"], C["y_prev"].reshape(-1), d_emb.reshape(-1, d_emb.shape[-1]))

    d_zh = d_h * (1.0 - h * h)
    g["W_in"] = np.einsum("btk,btd->kd", d_zh, C["x"])
    g["b_in"] = d_zh.sum((0, 1))
    g["P_enc"] = d_zh.sum(0)
    return ToyModelParams(**g)


def loss_and_grad(params, cfg, inputs, targets, mode="mma", epsilon=0, head_mask=None, energy_noise=None):
    logits, cache = forward(params, cfg, inputs, targets, mode, epsilon, head_mask, energy_noise)
    loss, d_logits = cross_entropy(logits, targets)
    return loss, backward(params, cfg, cache, d_logits), logits


def accuracy(logits, targets) -> float:
    return float(np.mean(np.argmax(logits, -1) == np.asarray(targets)))


class GreedyStepper:
    """Incremental inference for one utterance: probabilities per step, token per boundary set."""

    def __init__(self, params: ToyModelParams, cfg: ToyConfig, x):
        self.P = params
        self.cfg = cfg
        self.scale = 1.0 / np.sqrt(cfg.d_model)
        self.h = np.tanh(np.asarray(x) @ params.W_in.T + params.b_in + params.P_enc)
        self.k = np.einsum("td,mkd->mtk", self.h, params.W_k)
        self.ck = np.einsum("td,mkd->mtk", self.h, params.W_ck)
        self.prev_token = cfg.bos
        self._step = None
        self.p = None
        self.u = None

    def _prepare(self, step: int):
        if self._step == step:
            return
        P = self.P
        s = np.tanh((P.E_dec[self.prev_token] + P.P_dec[step - 1]) @ P.W_s.T + P.b_s)
        q = np.einsum("mkd,d->mk", P.W_q, s)
        cq = np.einsum("mkd,d->mk", P.W_cq, s)
        self.p = sigmoid(np.einsum("mtk,mk->mt", self.k, q) * self.scale + P.b_mono[:, None])
        self.u = np.einsum("mtk,mk->mt", self.ck, cq) * self.scale
        self._step = step

    def prob(self, head: int, step: int, frame: int) -> float:
        self._prepare(step)
        return self.p[head, frame - 1]

    def emit(self, step: int, boundaries) -> int:
        self._prepare(step)
        ctx = np.mean(
            [chunk_context_inference(b, self.h, self.u[m], self.cfg.chunk_width) for m, b in enumerate(boundaries)],
            axis=0,
        )
        token = int(np.argmax(ctx @ self.P.W_o.T + self.P.b_o))
        self.prev_token = token
        return token
