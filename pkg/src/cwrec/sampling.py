"""Training batches (anchor positive, uniform negatives, extra positives) and
the per-user positive prior used by the corrected losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .data import InteractionDataset
from .errors import InvalidConstant, InvalidPrior

__all__ = ["TrainingBatch", "PriorEstimate", "Sampler", "sample_batch", "estimate_prior"]

PRIOR_MODES = ("constant", "per_user_rate", "popularity")


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    users: np.ndarray      # [B]
    pos: np.ndarray        # [B]
    negs: np.ndarray       # [B, N]
    extra_pos: np.ndarray  # [B, M]

    def __len__(self) -> int:
        return len(self.users)

    @property
    def N(self) -> int:
        return self.negs.shape[1]

    @property
    def M(self) -> int:
        return self.extra_pos.shape[1]

    @property
    def rows(self):
        return [(int(u), int(i), self.negs[r].tolist(), self.extra_pos[r].tolist())
                for r, (u, i) in enumerate(zip(self.users, self.pos))]


class Sampler:
    """Owns a private random state over a frozen train split.

    Negatives are drawn with replacement from the whole item set, known
    positives included: the correction term in the loss accounts for them.
    """

    def __init__(self, train: InteractionDataset, n_negatives: int, n_extra: int = 4, seed=0):
        if n_negatives < 0 or n_extra < 0:
            raise ValueError("negative and extra-positive counts must be >= 0")
        if train.num_pairs == 0:
            raise ValueError("empty train split")
        self.train = train
        self.N = n_negatives
        self.M = n_extra
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._deg = train.user_degrees()

    def _fill(self, users: np.ndarray, pos: np.ndarray) -> TrainingBatch:
        rng = self.rng
        B = len(users)
        negs = rng.integers(0, self.train.num_items, size=(B, self.N), dtype=np.int64)
        if self.M:
            deg = self._deg[users]
            if np.any(deg == 0):
                raise ValueError("sampled a user with no train positives")
            offs = (rng.random((B, self.M)) * deg[:, None]).astype(np.int64)
            extra = self.train.indices[self.train.indptr[users][:, None] + offs]
        else:
            extra = np.empty((B, 0), dtype=np.int64)
        return TrainingBatch(users, pos, negs, extra)

    def sample(self, batch_size: int) -> TrainingBatch:
        """Anchors drawn uniformly (with replacement) over train pairs."""
        idx = self.rng.integers(0, self.train.num_pairs, size=batch_size)
        return self._fill(self.train.users[idx], self.train.items[idx])

    def epoch(self, batch_size: int) -> Iterator[TrainingBatch]:
        """One pass visiting every train pair once as an anchor, shuffled."""
        perm = self.rng.permutation(self.train.num_pairs)
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            yield self._fill(self.train.users[idx], self.train.items[idx])


def sample_batch(train: InteractionDataset, batch_size: int = 1024, N: int = 1000, M: int = 4,
                 seed: int = 0) -> TrainingBatch:
    return Sampler(train, N, M, seed).sample(batch_size)


@dataclass(frozen=True, eq=False)
class PriorEstimate:
    mode: str
    tau_plus: np.ndarray  # per user

    def __post_init__(self):
        tp = np.asarray(self.tau_plus, dtype=np.float64)
        if np.any(tp < 0) or np.any(tp >= 1) or not np.all(np.isfinite(tp)):
            raise InvalidPrior("tau_plus must lie in [0, 1) for every user")
        object.__setattr__(self, "tau_plus", tp)

    @property
    def tau_minus(self) -> np.ndarray:
        return 1.0 - self.tau_plus

    @classmethod
    def constant(cls, value: float, num_users: int) -> "PriorEstimate":
        if not 0 <= value < 1:
            raise InvalidConstant(f"prior constant {value} outside [0, 1)")
        return cls("constant", np.full(num_users, float(value)))


def estimate_prior(train: InteractionDataset, mode: str = "constant",
                   constant: Optional[float] = None) -> PriorEstimate:
    """Per-user probability that a uniformly drawn item is a positive.

    ``per_user_rate`` is ``|I_u| / |I|``. ``popularity`` weights items by
    their train interaction count: ``sum_{i in I_u} pop(i) / sum_i pop(i)``.
    """
    if mode == "constant":
        if constant is None:
            raise InvalidConstant("constant mode needs a value")
        return PriorEstimate.constant(constant, train.num_users)
    if mode == "per_user_rate":
        tp = train.user_degrees() / train.num_items
    elif mode == "popularity":
        pop = train.item_degrees().astype(np.float64)
        total = pop.sum()
        mass = np.bincount(train.users, weights=pop[train.items], minlength=train.num_users)
        tp = mass / total
    else:
        raise ValueError(f"unknown prior mode {mode!r}; expected one of {PRIOR_MODES}")
    if np.any(tp >= 1):
        raise InvalidPrior(f"{mode} prior reaches 1 for users {np.flatnonzero(tp >= 1)[:5].tolist()}")
    return PriorEstimate(mode, tp)
