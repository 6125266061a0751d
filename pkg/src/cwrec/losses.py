r"""Ranking losses over sampled score differences, with analytic gradients.

Every loss is computed per batch row from the differences
:math:`d_{uij} = r_{uj} - r_{ui}` (sampled negatives) and
:math:`d_{uik} = r_{uik} - r_{ui}` (extra positives), averaged over rows.
Score-level derivatives are then chained through the half-cosine (or dot
product for BPR) back to the user and item vectors touched by the batch.

The per-pair surrogate ``phi`` is kept in log space throughout:

* ``exp_of_activation``: ``log phi(d) = act(d) / tau`` with ``act`` the
  identity for ``activation="exp"`` (plain softmax), else relu/tanh/atan.
* ``raw_power``: ``log phi(d) = log(max(act(d), eps_clamp)) / tau`` with
  the shifted activations ``exp(d)``, ``relu(d + 1)``, ``tanh(d) + 1`` and
  ``atan(d) + 1`` (all equal 1 at ``d = 0`` and dominate the step function).

Summary of the row losses (``lse`` is log-sum-exp over the negatives)::

    SL   lse(d / tau)
    PSL  lse(log phi(d))
    L_W  lse(-beta d + log phi(d))
    BSL  lse(r_neg / tau1) - (tau2 / tau1) lse_P(r_pos / tau2), P = {anchor}
    L_C  log(Q/tau-) + log max(mean_j phi(d_j) - tau+ mean_k phi(d_k), eps)
    CW   log(Q/tau-) + log max(sum_j softmax(-beta d)_j phi(d_j)
                               - tau+ mean_k phi(d_k), eps)
    BPR  softplus(r_neg - r_pos), dot-product scores, one negative
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .backbones import EmbeddingTable, _unit_rows
from .errors import WrongNegativeCount
from .sampling import PriorEstimate, TrainingBatch

__all__ = [
    "LossConfig",
    "LossOutput",
    "PairScoreContext",
    "phi",
    "log_phi",
    "loss_bpr",
    "loss_sl",
    "loss_bsl",
    "loss_psl",
    "loss_weighted",
    "loss_corrected",
    "loss_cw",
    "compute_loss",
    "corrected_expectation_estimator",
    "LOSS_KINDS",
    "ACTIVATIONS",
    "SIGMA_FORMS",
]

LOSS_KINDS = ("BPR", "SL", "BSL", "PSL", "L_C", "L_W", "CW")
ACTIVATIONS = ("exp", "relu", "tanh", "atan")
SIGMA_FORMS = ("exp_of_activation", "raw_power")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "CW"
    tau: float = 0.2
    tau2: Optional[float] = None
    beta: float = 0.8
    activation: str = "relu"
    sigma_form: str = "raw_power"
    eps_clamp: float = 1e-8
    Q: Optional[float] = None  # None means Q = N

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.sigma_form not in SIGMA_FORMS:
            raise ValueError(f"unknown sigma_form {self.sigma_form!r}; expected one of {SIGMA_FORMS}")
        if not self.tau > 0 or (self.tau2 is not None and not self.tau2 > 0):
            raise ValueError("temperatures must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not 0 < self.eps_clamp <= 1e-3:
            raise ValueError("eps_clamp must lie in (0, 1e-3]")
        if self.Q is not None and not self.Q > 0:
            raise ValueError("Q must be > 0")

    @property
    def second_tau(self) -> float:
        return self.tau if self.tau2 is None else self.tau2

    @property
    def score_kind(self) -> str:
        return "dot" if self.kind == "BPR" else "cosine"


# activation and its derivative, per (form, name)
_ACT: dict[tuple[str, str], tuple[Callable, Callable]] = {
    ("exp_of_activation", "exp"): (lambda d: d, lambda d: np.ones_like(d)),
    ("exp_of_activation", "relu"): (lambda d: np.maximum(d, 0.0), lambda d: (d > 0).astype(float)),
    ("exp_of_activation", "tanh"): (np.tanh, lambda d: 1.0 - np.tanh(d) ** 2),
    ("exp_of_activation", "atan"): (np.arctan, lambda d: 1.0 / (1.0 + d * d)),
}
# raw_power uses the shifted activations with act(0) = 1 and act(d) >= step(d)
_ACT[("raw_power", "relu")] = (lambda d: np.maximum(d + 1.0, 0.0), lambda d: (d > -1.0).astype(float))
_ACT[("raw_power", "tanh")] = (lambda d: np.tanh(d) + 1.0, lambda d: 1.0 - np.tanh(d) ** 2)
_ACT[("raw_power", "atan")] = (lambda d: np.arctan(d) + 1.0, lambda d: 1.0 / (1.0 + d * d))


def log_phi(d: np.ndarray, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(log phi(d), d log phi / d d)`` elementwise."""
    d = np.asarray(d, dtype=np.float64)
    tau = cfg.tau
    if cfg.activation == "exp":
        # exp(d)^(1/tau) and exp(d/tau) coincide; skip the log(exp()) round trip
        return d / tau, np.full_like(d, 1.0 / tau)
    act, dact = _ACT[(cfg.sigma_form, cfg.activation)]
    if cfg.sigma_form == "exp_of_activation":
        return act(d) / tau, dact(d) / tau
    s = act(d)
    live = s > cfg.eps_clamp
    clamped = np.where(live, s, cfg.eps_clamp)
    grad = np.where(live, dact(d) / (tau * clamped), 0.0)
    return np.log(clamped) / tau, grad


def phi(d, cfg: LossConfig):
    """The per-pair surrogate term, e.g. ``exp(relu(d) / tau)``."""
    lp, _ = log_phi(d, cfg)
    out = np.exp(lp)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(eq=False)
class LossOutput:
    value: float
    grad_r_ui: np.ndarray
    grad_r_uj: np.ndarray
    grad_r_uik: np.ndarray
    user_ids: Optional[np.ndarray] = None
    user_grad: Optional[np.ndarray] = None
    item_ids: Optional[np.ndarray] = None
    item_grad: Optional[np.ndarray] = None
    clamp_rate: float = 0.0
    row_values: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def grads(self) -> dict[tuple[str, int], np.ndarray]:
        """Embedding gradients keyed by ``("user" | "item", id)``."""
        if self.user_ids is None:
            return {}
        out = {("user", int(u)): g for u, g in zip(self.user_ids, self.user_grad)}
        out.update({("item", int(i)): g for i, g in zip(self.item_ids, self.item_grad)})
        return out


class PairScoreContext:
    """Scores of one batch: anchors ``r_ui`` [B], negatives ``r_uj`` [B, N]
    and extra positives ``r_uik`` [B, M].

    Built either from raw score arrays (no embedding gradients) or from an
    :class:`EmbeddingTable` and a :class:`TrainingBatch`, in which case
    :meth:`backward` maps score gradients to embedding gradients.
    """

    def __init__(self, r_ui, r_uj, r_uik=None, users=None):
        self.r_ui = np.asarray(r_ui, dtype=np.float64).reshape(-1)
        self.r_uj = np.asarray(r_uj, dtype=np.float64).reshape(len(self.r_ui), -1)
        if r_uik is None:
            r_uik = np.empty((len(self.r_ui), 0))
        self.r_uik = np.asarray(r_uik, dtype=np.float64).reshape(len(self.r_ui), -1)
        self.users = None if users is None else np.asarray(users, dtype=np.int64)
        self._backward: Optional[Callable] = None

    @property
    def B(self) -> int:
        return len(self.r_ui)

    @property
    def N(self) -> int:
        return self.r_uj.shape[1]

    @property
    def M(self) -> int:
        return self.r_uik.shape[1]

    @property
    def d_uij(self) -> np.ndarray:
        return self.r_uj - self.r_ui[:, None]

    @property
    def d_uik(self) -> np.ndarray:
        return self.r_uik - self.r_ui[:, None]

    @classmethod
    def from_embeddings(cls, table: EmbeddingTable, batch: TrainingBatch,
                        score_kind: str = "cosine") -> "PairScoreContext":
        users = np.asarray(batch.users, dtype=np.int64)
        B, I = len(users), table.num_items
        U = table.user_vecs[users]
        if score_kind == "cosine":
            uhat, unorm = _unit_rows(U)
            ihat, inorm = _unit_rows(table.item_vecs)
            S = 0.5 * (uhat @ ihat.T)
        elif score_kind == "dot":
            S = U @ table.item_vecs.T
        else:
            raise ValueError(f"unknown score kind {score_kind!r}")
        rows = np.arange(B)
        ctx = cls(S[rows, batch.pos],
                  np.take_along_axis(S, batch.negs, axis=1),
                  np.take_along_axis(S, batch.extra_pos, axis=1),
                  users)
        cols = np.concatenate([batch.pos[:, None], batch.negs, batch.extra_pos], axis=1)
        flat = (rows[:, None] * I + cols).ravel()

        def backward(g_ui, g_uj, g_uik):
            w = np.concatenate([g_ui[:, None], g_uj, g_uik], axis=1).ravel()
            G = np.bincount(flat, weights=w, minlength=B * I).reshape(B, I)
            touched = np.unique(cols)
            uniq, inv = np.unique(users, return_inverse=True)
            if score_kind == "cosine":
                du_hat = 0.5 * (G @ ihat)
                di_hat = 0.5 * (G[:, touched].T @ uhat)
                du = (du_hat - np.sum(du_hat * uhat, axis=1, keepdims=True) * uhat) / unorm
                it_hat, it_norm = ihat[touched], inorm[touched]
                di = (di_hat - np.sum(di_hat * it_hat, axis=1, keepdims=True) * it_hat) / it_norm
            else:
                du = G @ table.item_vecs
                di = G[:, touched].T @ U
            ug = np.zeros((len(uniq), table.d))
            np.add.at(ug, inv, du)
            return uniq, ug, touched, di

        ctx._backward = backward
        return ctx

    def backward(self, g_ui, g_uj, g_uik):
        if self._backward is None:
            return None
        return self._backward(g_ui, g_uj, g_uik)


def _finish(ctx: PairScoreContext, rows: np.ndarray, g_dj: np.ndarray, g_dk: np.ndarray,
            clamped: Optional[np.ndarray] = None) -> LossOutput:
    """Average over rows and chain d-gradients to score and embedding gradients."""
    B = ctx.B
    g_dj = g_dj / B
    g_dk = g_dk / B
    g_ui = -(g_dj.sum(axis=1) + g_dk.sum(axis=1))
    out = LossOutput(
        value=float(rows.mean()),
        grad_r_ui=g_ui,
        grad_r_uj=g_dj,
        grad_r_uik=g_dk,
        clamp_rate=float(np.mean(clamped)) if clamped is not None else 0.0,
        row_values=rows,
    )
    back = ctx.backward(g_ui, g_dj, g_dk)
    if back is not None:
        out.user_ids, out.user_grad, out.item_ids, out.item_grad = back
    return out


def _require_negatives(ctx: PairScoreContext):
    if ctx.N < 1:
        raise WrongNegativeCount("loss needs at least one negative per row")


def _weighted_lse(logits: np.ndarray, dlogits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``log sum exp(logits)`` and its gradient given ``d logits/d d``."""
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    tot = ex.sum(axis=1, keepdims=True)
    return np.log(tot[:, 0]) + shift[:, 0], (ex / tot) * dlogits


def loss_bpr(ctx: PairScoreContext, cfg: Optional[LossConfig] = None) -> LossOutput:
    """``-log sigmoid(r_ui - r_uj)``, one negative per row."""
    if ctx.N != 1:
        raise WrongNegativeCount(f"BPR takes exactly one negative per row, got {ctx.N}")
    d = ctx.d_uij
    rows = np.logaddexp(0.0, d)[:, 0]
    g = 0.5 * (1.0 + np.tanh(0.5 * d))  # sigmoid(d), overflow-free
    return _finish(ctx, rows, g, np.zeros_like(ctx.r_uik))


def loss_sl(ctx: PairScoreContext, cfg: LossConfig) -> LossOutput:
    _require_negatives(ctx)
    d = ctx.d_uij
    rows, g = _weighted_lse(d / cfg.tau, np.full_like(d, 1.0 / cfg.tau))
    return _finish(ctx, rows, g, np.zeros_like(ctx.r_uik))


def loss_psl(ctx: PairScoreContext, cfg: LossConfig) -> LossOutput:
    _require_negatives(ctx)
    lp, dlp = log_phi(ctx.d_uij, cfg)
    rows, g = _weighted_lse(lp, dlp)
    return _finish(ctx, rows, g, np.zeros_like(ctx.r_uik))


def loss_weighted(ctx: PairScoreContext, cfg: LossConfig) -> LossOutput:
    """Confidence-weighted surrogate: weight ``exp(-beta d)`` per negative."""
    _require_negatives(ctx)
    d = ctx.d_uij
    lp, dlp = log_phi(d, cfg)
    rows, g = _weighted_lse(-cfg.beta * d + lp, dlp - cfg.beta)
    return _finish(ctx, rows, g, np.zeros_like(ctx.r_uik))


def loss_bsl(ctx: PairScoreContext, cfg: LossConfig) -> LossOutput:
    """Bilateral softmax: log-sum-exp over negatives at ``tau`` minus a
    log-sum-exp over the row's positives at ``tau2``.

    Rows carry one anchor positive, so the positive side is that single
    score and the loss coincides with SL for any ``tau2``.
    """
    _require_negatives(ctx)
    t1, t2 = cfg.tau, cfg.second_tau
    neg_lse, g_neg = _weighted_lse(ctx.r_uj / t1, np.full_like(ctx.r_uj, 1.0 / t1))
    pos = ctx.r_ui[:, None]
    pos_lse, g_pos = _weighted_lse(pos / t2, np.full_like(pos, 1.0 / t2))
    rows = neg_lse - (t2 / t1) * pos_lse
    g_ui = -(t2 / t1) * g_pos[:, 0]
    # express as d-gradients: r_uj enters only through the negative side
    B = ctx.B
    out = LossOutput(value=float(rows.mean()), grad_r_ui=g_ui / B, grad_r_uj=g_neg / B,
                     grad_r_uik=np.zeros_like(ctx.r_uik), row_values=rows)
    back = ctx.backward(out.grad_r_ui, out.grad_r_uj, out.grad_r_uik)
    if back is not None:
        out.user_ids, out.user_grad, out.item_ids, out.item_grad = back
    return out


def _tau_plus_rows(ctx: PairScoreContext, prior) -> np.ndarray:
    if isinstance(prior, PriorEstimate):
        if ctx.users is None:
            raise ValueError("a per-user prior needs a context that knows its users")
        return prior.tau_plus[ctx.users]
    tp = np.broadcast_to(np.asarray(prior, dtype=np.float64), (ctx.B,))
    if np.any(tp < 0) or np.any(tp >= 1):
        raise ValueError("tau_plus must lie in [0, 1)")
    return tp


def _corrected(ctx: PairScoreContext, cfg: LossConfig, prior, beta: float) -> LossOutput:
    """Shared body of L_C (``beta = 0``) and CW."""
    _require_negatives(ctx)
    tp = _tau_plus_rows(ctx, prior)
    if ctx.M < 1 and np.any(tp > 0):
        raise WrongNegativeCount("the correction term needs at least one extra positive per row")
    Q = float(ctx.N if cfg.Q is None else cfg.Q)
    d_j, d_k = ctx.d_uij, ctx.d_uik
    lp_j, dlp_j = log_phi(d_j, cfg)
    lp_k, dlp_k = log_phi(d_k, cfg)

    # self-normalized weights over the sampled negatives
    wl = -beta * d_j
    w = np.exp(wl - wl.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)

    shift = lp_j.max(axis=1, keepdims=True)
    if ctx.M:
        shift = np.maximum(shift, lp_k.max(axis=1, keepdims=True))
    ph_j = np.exp(lp_j - shift)
    ph_k = np.exp(lp_k - shift)
    A = np.sum(w * ph_j, axis=1)
    Bc = (tp / ctx.M) * ph_k.sum(axis=1) if ctx.M else np.zeros(ctx.B)
    inner = A - Bc
    log_eps = np.log(cfg.eps_clamp)
    positive = inner > 0
    log_unclamped = np.log(np.where(positive, inner, 1.0)) + shift[:, 0]
    clamped = ~positive | (log_unclamped <= log_eps)
    safe = np.where(clamped, 1.0, inner)
    log_inner = np.where(clamped, log_eps, log_unclamped)
    rows = np.log(Q) - np.log1p(-tp) + log_inner

    dA = w * (ph_j * dlp_j - beta * (ph_j - A[:, None]))
    dB = (tp / max(ctx.M, 1))[:, None] * ph_k * dlp_k
    live = (~clamped)[:, None] / safe[:, None]
    return _finish(ctx, rows, dA * live, -dB * live, clamped)


def loss_corrected(ctx: PairScoreContext, cfg: LossConfig, prior) -> LossOutput:
    """Positive-unlabeled corrected surrogate (uniform mean over negatives)."""
    return _corrected(ctx, cfg, prior, beta=0.0)


def loss_cw(ctx: PairScoreContext, cfg: LossConfig, prior) -> LossOutput:
    """Corrected-and-weighted loss."""
    return _corrected(ctx, cfg, prior, beta=cfg.beta)


def compute_loss(ctx: PairScoreContext, cfg: LossConfig,
                 prior: Union[PriorEstimate, float, None] = None) -> LossOutput:
    kind = cfg.kind
    if kind == "BPR":
        return loss_bpr(ctx, cfg)
    if kind == "SL":
        return loss_sl(ctx, cfg)
    if kind == "BSL":
        return loss_bsl(ctx, cfg)
    if kind == "PSL":
        return loss_psl(ctx, cfg)
    if kind == "L_W":
        return loss_weighted(ctx, cfg)
    if prior is None:
        raise ValueError(f"{kind} needs a prior")
    if kind == "L_C":
        return loss_corrected(ctx, cfg, prior)
    return loss_cw(ctx, cfg, prior)


def corrected_expectation_estimator(samples_p, samples_pplus, tau_plus: float) -> float:
    """Estimate the mean over the negative component from draws of the
    mixture and of the positive component: ``(mean(p) - t+ mean(p+)) / (1 - t+)``.

    Inputs are already-transformed values (e.g. ``exp(d / tau)``).
    """
    if not 0 <= tau_plus < 1:
        raise ValueError("tau_plus must lie in [0, 1)")
    mix = float(np.mean(samples_p))
    pos = float(np.mean(samples_pplus)) if tau_plus > 0 else 0.0
    return (mix - tau_plus * pos) / (1.0 - tau_plus)
