"""Row-sparse Adam with decoupled weight decay, and the epoch training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .backbones import BackboneConfig, EmbeddingTable, Recommender, build_adjacency, init_embeddings, \
    xsimgcl_contrast_loss
from .data import SplitDataset
from .errors import NonFiniteGradient
from .evaluation import evaluate
from .losses import LossConfig, PairScoreContext, compute_loss
from .sampling import PriorEstimate, Sampler

__all__ = ["AdamState", "adam_step", "TrainSchedule", "OptimConfig", "SamplerConfig",
           "EpochRecord", "TrainResult", "train", "build_model", "write_epoch_log"]

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    wd: float = 0.0
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, lr: float = 1e-3, wd: float = 0.0) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), lr=lr, wd=wd)

    def step(self, params: np.ndarray, rows: np.ndarray, grads: np.ndarray) -> None:
        """Update ``params[rows]`` in place. ``rows`` must be unique.

        Only the listed rows touch their moments (lazy Adam); the bias
        correction uses the global step count.
        """
        if not np.all(np.isfinite(grads)):
            raise NonFiniteGradient("non-finite gradient passed to Adam")
        self.t += 1
        if len(rows) == 0:
            return
        b1, b2 = self.beta1, self.beta2
        m = b1 * self.m[rows] + (1.0 - b1) * grads
        v = b2 * self.v[rows] + (1.0 - b2) * (grads * grads)
        self.m[rows] = m
        self.v[rows] = v
        m_hat = m / (1.0 - b1 ** self.t)
        v_hat = v / (1.0 - b2 ** self.t)
        p = params[rows]
        if self.wd:
            p = p * (1.0 - self.lr * self.wd)
        params[rows] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: AdamState, params: np.ndarray, rows, grads) -> tuple[AdamState, np.ndarray]:
    state.step(params, np.asarray(rows, dtype=np.int64), np.asarray(grads, dtype=np.float64))
    return state, params


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 200
    batch_size: int = 1024
    eval_every: int = 1
    early_stop_patience: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    wd: float = 0.0


@dataclass(frozen=True)
class SamplerConfig:
    N: int = 1000
    M: int = 4


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    clamp_rate: float
    val_recall: Optional[float] = None
    val_ndcg: Optional[float] = None


@dataclass
class TrainResult:
    model: Recommender
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def build_model(split: SplitDataset, backbone: BackboneConfig, score_kind: str, seed: int) -> Recommender:
    base = init_embeddings(split.num_users, split.num_items, backbone.d, seed, backbone.init_scale)
    adj = build_adjacency(split.train) if backbone.num_layers else None
    # parameters live in one stacked matrix; the table holds row views of it
    params = base.stacked()
    model = Recommender(backbone, EmbeddingTable.from_stacked(params, split.num_users), adj, score_kind)
    model.params = params
    return model


def _step_gradients(model: Recommender, batch, loss_cfg: LossConfig, prior, rng):
    """Loss value, clamp rate and (rows, grads) w.r.t. the stacked base table."""
    nu = model.num_users
    cfg = model.config
    final, per_layer = model.forward(rng, training=True)
    ctx = PairScoreContext.from_embeddings(final, batch, loss_cfg.score_kind)
    out = compute_loss(ctx, loss_cfg, prior)
    value = out.value
    if cfg.num_layers == 0:
        rows = np.concatenate([out.user_ids, out.item_ids + nu])
        return value, out.clamp_rate, rows, np.vstack([out.user_grad, out.item_grad])

    G = np.zeros((nu + model.num_items, final.d))
    G[out.user_ids] += out.user_grad
    G[out.item_ids + nu] += out.item_grad
    grad_layers = None
    if cfg.kind == "XSimGCL" and cfg.contrast_weight > 0:
        gL = np.zeros_like(G)
        for nodes in (np.unique(batch.users), np.unique(batch.pos) + nu):
            cl, gf, gl = xsimgcl_contrast_loss(per_layer, final, nodes, cfg.contrast_temp,
                                               cfg.contrast_weight, cfg.contrast_layer)
            value += cl
            G += gf
            gL += gl
        grad_layers = {cfg.contrast_layer: gL}
    base_grad = model.backward(G, grad_layers)
    rows = np.flatnonzero(np.any(base_grad != 0, axis=1))
    return value, out.clamp_rate, rows, base_grad[rows]


def train(split: SplitDataset, backbone: BackboneConfig, loss_cfg: LossConfig,
          prior: Optional[PriorEstimate], schedule: TrainSchedule = TrainSchedule(), seed: int = 0,
          sampler: SamplerConfig = SamplerConfig(), optim: OptimConfig = OptimConfig(),
          K: int = 20) -> TrainResult:
    """Train with Adam and keep the checkpoint with the best validation NDCG@K.

    When the validation split is empty, the last epoch's model is returned.
    """
    if loss_cfg.kind == "BPR" and sampler.N != 1:
        sampler = SamplerConfig(N=1, M=sampler.M)
    ss = np.random.SeedSequence(seed)
    init_seed, sample_seed, noise_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    model = build_model(split, backbone, loss_cfg.score_kind, init_seed)
    result = TrainResult(model)
    if schedule.epochs == 0:
        return result

    params = model.params
    adam = AdamState.zeros_like(params, optim.lr, optim.wd)
    needs_extra = loss_cfg.kind in ("L_C", "CW")
    smp = Sampler(split.train, sampler.N, sampler.M if needs_extra else 0, sample_seed)
    noise_rng = np.random.default_rng(noise_seed)
    has_val = split.validation.num_pairs > 0
    best_ndcg = -math.inf
    best_params = params.copy()
    stale = 0

    for epoch in range(1, schedule.epochs + 1):
        losses, clamps, sizes = [], [], []
        for batch in smp.epoch(schedule.batch_size):
            value, clamp, rows, grads = _step_gradients(model, batch, loss_cfg, prior, noise_rng)
            if not math.isfinite(value):
                raise NonFiniteGradient(f"non-finite loss at epoch {epoch}")
            adam.step(params, rows, grads)
            losses.append(value)
            clamps.append(clamp)
            sizes.append(len(batch))
        rec = EpochRecord(epoch, float(np.average(losses, weights=sizes)),
                          float(np.average(clamps, weights=sizes)))
        if has_val and (epoch % schedule.eval_every == 0 or epoch == schedule.epochs):
            rep = evaluate(model, split.validation, split.train, K)
            rec.val_recall, rec.val_ndcg = rep.mean_recall, rep.mean_ndcg
            if rep.mean_ndcg > best_ndcg:
                best_ndcg, result.best_epoch, stale = rep.mean_ndcg, epoch, 0
                best_params[...] = params
            else:
                stale += 1
        result.log.append(rec)
        logger.debug("epoch %d loss %.6f ndcg %s", epoch, rec.train_loss, rec.val_ndcg)
        if schedule.early_stop_patience is not None and stale > schedule.early_stop_patience:
            break

    if has_val:
        params[...] = best_params
    else:
        result.best_epoch = result.log[-1].epoch
    return result


def write_epoch_log(log: list[EpochRecord], path, K: int = 20) -> None:
    def fmt(x):
        return "" if x is None else repr(x)

    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "clamp_rate", f"val_recall@{K}", f"val_ndcg@{K}"])
        for r in log:
            w.writerow([r.epoch, fmt(r.train_loss), fmt(r.clamp_rate), fmt(r.val_recall), fmt(r.val_ndcg)])
