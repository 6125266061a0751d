"""Shared fixtures-by-function for the test modules."""

from __future__ import annotations

import numpy as np

from cwrec.backbones import EmbeddingTable, score_matrix
from cwrec.losses import LossConfig, PairScoreContext, compute_loss
from cwrec.sampling import TrainingBatch


def random_problem(rng, d=8, N=6, M=3, B=2, num_items=None):
    """A small table plus a batch whose rows may share items."""
    num_items = num_items or (1 + N + M) * B
    table = EmbeddingTable(rng.standard_normal((B, d)), rng.standard_normal((num_items, d)))
    batch = TrainingBatch(
        users=np.arange(B),
        pos=rng.integers(num_items, size=B),
        negs=rng.integers(num_items, size=(B, N)),
        extra_pos=rng.integers(num_items, size=(B, M)),
    )
    return table, batch


def loss_value(table, batch, cfg: LossConfig, prior=None) -> float:
    """Loss computed from raw scores only (no embedding backward)."""
    S = score_matrix(table, batch.users, cfg.score_kind)
    rows = np.arange(len(batch))
    ctx = PairScoreContext(S[rows, batch.pos], np.take_along_axis(S, batch.negs, 1),
                           np.take_along_axis(S, batch.extra_pos, 1), batch.users)
    return compute_loss(ctx, cfg, prior).value


def analytic_grads(table, batch, cfg, prior=None):
    """Dense (user, item) gradient matrices from the analytic path."""
    ctx = PairScoreContext.from_embeddings(table, batch, cfg.score_kind)
    out = compute_loss(ctx, cfg, prior)
    gu = np.zeros_like(table.user_vecs)
    gi = np.zeros_like(table.item_vecs)
    gu[out.user_ids] = out.user_grad
    gi[out.item_ids] = out.item_grad
    return out, gu, gi


def numeric_grads(table, batch, cfg, prior=None, h=1e-5):
    gu = np.zeros_like(table.user_vecs)
    gi = np.zeros_like(table.item_vecs)
    for mat, g in ((table.user_vecs, gu), (table.item_vecs, gi)):
        for idx in np.ndindex(mat.shape):
            old = mat[idx]
            mat[idx] = old + h
            up = loss_value(table, batch, cfg, prior)
            mat[idx] = old - h
            down = loss_value(table, batch, cfg, prior)
            mat[idx] = old
            g[idx] = (up - down) / (2 * h)
    return gu, gi


def max_rel_error(a, b, floor=1e-7) -> float:
    """Largest relative error over entries whose absolute error exceeds ``floor``."""
    a = np.ravel(a)
    b = np.ravel(b)
    err = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(err < floor, 0.0, err / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


def gradient_error(table, batch, cfg, prior=None) -> float:
    _, gu, gi = analytic_grads(table, batch, cfg, prior)
    nu, ni = numeric_grads(table, batch, cfg, prior)
    return max(max_rel_error(gu, nu), max_rel_error(gi, ni))


def _half_cos(a, b):
    return 0.5 * np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def stacked_numeric_grads(table, batch, cfg, prior=None, h=1e-5):
    """Central differences for every coordinate in one loss call.

    Each perturbed copy of the parameters contributes its own block of rows;
    the loss is a mean over independent rows, so block means recover the
    perturbed loss values. Cosine scores only.
    """
    U, I = table.user_vecs, table.item_vecs
    theta = np.concatenate([U.ravel(), I.ravel()])
    P = theta.size
    stack = np.concatenate([theta + h * np.eye(P), theta - h * np.eye(P)])
    Us = stack[:, :U.size].reshape(2 * P, *U.shape)
    Is = stack[:, U.size:].reshape(2 * P, *I.shape)
    u = Us[:, batch.users][:, :, None, :]
    r_ui = _half_cos(u[:, :, 0], Is[:, batch.pos])
    r_uj = _half_cos(u, Is[:, batch.negs])
    r_uik = _half_cos(u, Is[:, batch.extra_pos])
    B = len(batch)
    ctx = PairScoreContext(r_ui.ravel(), r_uj.reshape(2 * P * B, -1), r_uik.reshape(2 * P * B, -1),
                           np.tile(batch.users, 2 * P))
    vals = compute_loss(ctx, cfg, prior).row_values.reshape(2 * P, B).mean(axis=1)
    g = (vals[:P] - vals[P:]) / (2 * h)
    return g[:U.size].reshape(U.shape), g[U.size:].reshape(I.shape)
