"""Synthetic interaction data with known structure, for tests and ablations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionDataset, SplitDataset, split_dataset

__all__ = ["block_dataset", "planted_false_negatives", "PlantedSplit", "toy_rows"]


def block_dataset(n_users: int = 60, n_items: int = 40, n_blocks: int = 2, noise_frac: float = 0.1,
                  val_frac: float = 0.2, seed: int = 0) -> SplitDataset:
    """Users and items partitioned into blocks; each user likes every item of
    its block.

    ``val_frac`` of each user's in-block items go to validation; the rest are
    train. Cross-block noise edges (``noise_frac`` times the number of clean
    pairs) are added to train only. Test is empty.
    """
    rng = np.random.default_rng(seed)
    ublock = np.arange(n_users) * n_blocks // n_users
    iblock = np.arange(n_items) * n_blocks // n_items
    tr_u, tr_i, va_u, va_i = [], [], [], []
    for u in range(n_users):
        items = np.flatnonzero(iblock == ublock[u])
        items = items[rng.permutation(len(items))]
        n_val = int(round(val_frac * len(items)))
        va_u += [u] * n_val
        va_i += items[:n_val].tolist()
        tr_u += [u] * (len(items) - n_val)
        tr_i += items[n_val:].tolist()
    clean = len(tr_u) + len(va_u)
    noise = set()
    while len(noise) < int(round(noise_frac * clean)):
        u = int(rng.integers(n_users))
        i = int(rng.integers(n_items))
        if iblock[i] != ublock[u]:
            noise.add((u, i))
    for u, i in sorted(noise):
        tr_u.append(u)
        tr_i.append(i)
    train = InteractionDataset.from_pairs(n_users, n_items, tr_u, tr_i)
    val = InteractionDataset.from_pairs(n_users, n_items, va_u, va_i)
    empty = InteractionDataset.from_pairs(n_users, n_items, [], [])
    return SplitDataset(train, val, empty, seed)


@dataclass(frozen=True, eq=False)
class PlantedSplit:
    split: SplitDataset
    hidden: InteractionDataset  # true positives withheld from all observed data
    truth: InteractionDataset   # test pairs plus hidden pairs

    @property
    def train(self) -> InteractionDataset:
        return self.split.train


def planted_false_negatives(n_users: int = 300, n_items: int = 200, n_groups: int = 8,
                            p_in: float = 0.35, p_out: float = 0.01, hide_frac: float = 0.2,
                            test_frac: float = 0.2, val_frac: float = 0.1, seed: int = 0) -> PlantedSplit:
    """Clustered preferences with a fraction of true positives hidden.

    Users and items carry one of ``n_groups`` labels; a user truly likes each
    same-group item with probability ``p_in`` and any other item with
    probability ``p_out``. ``hide_frac`` of every user's true positives are
    removed before splitting, so they reappear during training only as
    unlabeled (false-negative) samples. ``truth`` scores a model on both the
    held-out test pairs and the hidden positives.
    """
    rng = np.random.default_rng(seed)
    ug = rng.integers(n_groups, size=n_users)
    ig = np.arange(n_items) % n_groups
    prob = np.where(ug[:, None] == ig[None, :], p_in, p_out)
    liked = rng.random((n_users, n_items)) < prob
    # every user and item keeps enough pairs to train on
    for u in range(n_users):
        if liked[u].sum() < 5:
            same = np.flatnonzero(ig == ug[u])
            liked[u, rng.choice(same, size=5, replace=False)] = True
    obs_u, obs_i, hid_u, hid_i = [], [], [], []
    for u in range(n_users):
        items = np.flatnonzero(liked[u])
        items = items[rng.permutation(len(items))]
        n_hide = int(round(hide_frac * len(items)))
        hid_u += [u] * n_hide
        hid_i += items[:n_hide].tolist()
        obs_u += [u] * (len(items) - n_hide)
        obs_i += items[n_hide:].tolist()
    observed = InteractionDataset.from_pairs(n_users, n_items, obs_u, obs_i)
    hidden = InteractionDataset.from_pairs(n_users, n_items, hid_u, hid_i)
    split = split_dataset(observed, test_frac, val_frac, seed)
    truth = InteractionDataset.from_pairs(
        n_users, n_items,
        np.concatenate([split.test.users, hidden.users]),
        np.concatenate([split.test.items, hidden.items]),
    )
    return PlantedSplit(split, hidden, truth)


def toy_rows(n_users: int = 16, n_items: int = 20, seed: int = 7) -> list[tuple[str, str, int, int]]:
    """The bundled 200-interaction toy log: two blocks, every item held by
    exactly 10 users (8 in-block, 2 cross-block), so it survives 10-core."""
    rng = np.random.default_rng(seed)
    half_u, half_i = n_users // 2, n_items // 2
    rows = []
    cross_load = np.zeros(n_users, dtype=int)
    for i in range(n_items):
        block = i // half_i
        members = list(range(block * half_u, (block + 1) * half_u))
        others = [u for u in range(n_users) if u not in members]
        # spread cross edges evenly over users
        others.sort(key=lambda u: (cross_load[u], rng.random()))
        picks = others[:2]
        cross_load[picks] += 1
        for u in members + picks:
            rows.append((f"u{u:02d}", f"i{i:02d}", int(rng.integers(3, 6)), 1_000_000 + len(rows)))
    order = rng.permutation(len(rows))
    return [rows[k] for k in order]
