"""Masked full-ranking Top-K evaluation.

Ranking ties are broken by ascending item id. :func:`dcg_full` instead
uses the Heaviside rank (an item tied with ``t`` others sits at the worst
of those positions), matching the bound analysis in the loss module.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .data import InteractionDataset
from .errors import EmptyGroundTruth

__all__ = [
    "RankingReport",
    "rank_items",
    "recall_at_k",
    "ndcg_at_k",
    "dcg_full",
    "heaviside_ranks",
    "evaluate",
]


def rank_items(scores, mask: Iterable[int] = ()) -> np.ndarray:
    """Item ids by descending score, masked ids removed, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    mask = np.fromiter(mask, dtype=np.int64) if not isinstance(mask, np.ndarray) else mask
    if len(mask):
        keep = np.ones(len(scores), dtype=bool)
        keep[mask] = False
        order = order[keep[order]]
    return order


def _check_truth(ground_truth) -> set:
    truth = set(int(i) for i in ground_truth)
    if not truth:
        raise EmptyGroundTruth("ground truth is empty")
    return truth


def recall_at_k(ranked, ground_truth, K: int) -> float:
    truth = _check_truth(ground_truth)
    hits = sum(1 for i in list(ranked)[:K] if int(i) in truth)
    return hits / len(truth)


def _idcg(n: int) -> float:
    return sum(1.0 / math.log2(1 + r) for r in range(1, n + 1))


def ndcg_at_k(ranked, ground_truth, K: int) -> float:
    truth = _check_truth(ground_truth)
    dcg = sum(1.0 / math.log2(1 + pos) for pos, i in enumerate(list(ranked)[:K], start=1)
              if int(i) in truth)
    return dcg / _idcg(min(K, len(truth)))


def heaviside_ranks(scores, positives) -> np.ndarray:
    """``pi(i) = #{j : s_j >= s_i}`` for each positive ``i`` (counts itself)."""
    scores = np.asarray(scores, dtype=np.float64)
    srt = np.sort(scores)
    pos = np.asarray(list(positives), dtype=np.int64)
    return len(scores) - np.searchsorted(srt, scores[pos], side="left")


def dcg_full(scores, positives) -> float:
    """Unbounded DCG over all items with Heaviside ranks."""
    pos = list(positives)
    if not pos:
        raise EmptyGroundTruth("positives are empty")
    ranks = heaviside_ranks(scores, pos)
    return float(np.sum(1.0 / np.log2(1.0 + ranks)))


@dataclass
class RankingReport:
    K: int
    per_user: dict = field(default_factory=dict)  # user -> (recall, ndcg, hits)

    @property
    def users_evaluated(self) -> int:
        return len(self.per_user)

    @property
    def mean_recall(self) -> float:
        if not self.per_user:
            return 0.0
        return float(np.mean([v[0] for v in self.per_user.values()]))

    @property
    def mean_ndcg(self) -> float:
        if not self.per_user:
            return 0.0
        return float(np.mean([v[1] for v in self.per_user.values()]))

    def merge(self, other: "RankingReport") -> "RankingReport":
        if other.K != self.K:
            raise ValueError("cannot merge reports with different cutoffs")
        return RankingReport(self.K, {**self.per_user, **other.per_user})

    def summary(self) -> str:
        return (f"K={self.K} users_evaluated={self.users_evaluated} "
                f"recall@{self.K}={self.mean_recall:.6f} ndcg@{self.K}={self.mean_ndcg:.6f}")

    def to_csv(self, path) -> None:
        """Columns ``user_id,recall,ndcg``; the last row is ``ALL`` with means."""
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "recall", "ndcg"])
            for u in sorted(self.per_user):
                r, n, _ = self.per_user[u]
                w.writerow([u, repr(r), repr(n)])
            w.writerow(["ALL", repr(self.mean_recall), repr(self.mean_ndcg)])

    @classmethod
    def read_aggregate(cls, path) -> tuple[float, float]:
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        if rows[-1][0] != "ALL":
            raise ValueError(f"{path} has no aggregate row")
        return float(rows[-1][1]), float(rows[-1][2])


def evaluate(model, truth: InteractionDataset, train_mask: Optional[InteractionDataset] = None,
             K: int = 20, chunk: int = 512) -> RankingReport:
    """Rank all items per user (train positives masked) against ``truth``.

    ``model`` needs ``score_matrix(users) -> [len(users), num_items]``.
    Users with no ground truth are skipped.
    """
    users = np.flatnonzero(truth.user_degrees() > 0)
    report = RankingReport(K)
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        S = np.array(model.score_matrix(block), dtype=np.float64)
        if train_mask is not None:
            for r, u in enumerate(block):
                S[r, train_mask.positives(u)] = -np.inf
        order = np.argsort(-S, axis=1, kind="stable")
        for r, u in enumerate(block):
            n_masked = 0 if train_mask is None else len(train_mask.positives(u))
            top = order[r, :min(K, truth.num_items - n_masked)]
            gt = truth.positives(u)
            hits = np.isin(top, gt)
            n_hits = int(hits.sum())
            dcg = float(np.sum(1.0 / np.log2(np.flatnonzero(hits) + 2.0)))
            report.per_user[int(u)] = (n_hits / len(gt), dcg / _idcg(min(K, len(gt))), n_hits)
    return report
