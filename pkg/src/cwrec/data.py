"""Interaction ingestion, preprocessing (rating filter, k-core) and splitting."""

from __future__ import annotations

import csv
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyAfterFilter, EmptyInput, MalformedLine

__all__ = [
    "RawInteraction",
    "InteractionDataset",
    "SplitDataset",
    "load_interactions",
    "filter_ratings",
    "k_core_filter",
    "index_dataset",
    "split_dataset",
    "dataset_stats",
]

_DELIMITERS = {"tsv": "\t", "csv": ","}


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    rating: Optional[float] = None
    timestamp: Optional[int] = None

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise ValueError("user_key and item_key must be non-empty")


def load_interactions(path, format: str = "tsv") -> list[RawInteraction]:
    """Parse a delimited file with columns ``user, item[, rating[, timestamp]]``.

    Blank lines are skipped. A line with fewer than 2 or more than 4 fields,
    or an unparsable rating/timestamp, raises :class:`MalformedLine`.
    """
    try:
        delimiter = _DELIMITERS[format]
    except KeyError:
        raise ValueError(f"unknown format {format!r}; expected one of {sorted(_DELIMITERS)}") from None
    out: list[RawInteraction] = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for line_no, fields in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            fields = [f.strip() for f in fields]
            if not fields or all(f == "" for f in fields):
                continue
            if not 2 <= len(fields) <= 4:
                raise MalformedLine(line_no, f"expected 2-4 fields, got {len(fields)}")
            user, item = fields[0], fields[1]
            if not user or not item:
                raise MalformedLine(line_no, "empty user or item key")
            rating = timestamp = None
            try:
                if len(fields) >= 3 and fields[2] != "":
                    rating = float(fields[2])
                if len(fields) == 4 and fields[3] != "":
                    timestamp = int(float(fields[3]))
            except ValueError as exc:
                raise MalformedLine(line_no, str(exc)) from None
            out.append(RawInteraction(user, item, rating, timestamp))
    return out


def filter_ratings(raw: Iterable[RawInteraction], min_rating: float) -> list[RawInteraction]:
    """Drop interactions whose rating is present and below ``min_rating``."""
    return [r for r in raw if r.rating is None or r.rating >= min_rating]


def k_core_filter(raw: Sequence[RawInteraction], k: int) -> list[RawInteraction]:
    """Keep the interactions of the maximal subgraph where every user and item
    has at least ``k`` distinct partners.

    Iterative pruning driven by a queue of under-degree nodes. Degrees count
    distinct (user, item) pairs, so duplicate log lines do not inflate them.
    Input order of the surviving interactions is preserved.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    user_adj: dict[str, set[str]] = defaultdict(set)
    item_adj: dict[str, set[str]] = defaultdict(set)
    for r in raw:
        user_adj[r.user_key].add(r.item_key)
        item_adj[r.item_key].add(r.user_key)

    queue = deque([("u", u) for u, s in user_adj.items() if len(s) < k])
    queue.extend(("i", i) for i, s in item_adj.items() if len(s) < k)
    removed_users: set[str] = set()
    removed_items: set[str] = set()
    while queue:
        side, key = queue.popleft()
        if side == "u":
            if key in removed_users:
                continue
            removed_users.add(key)
            for item in user_adj.pop(key):
                partners = item_adj[item]
                partners.discard(key)
                if len(partners) < k and item not in removed_items:
                    queue.append(("i", item))
        else:
            if key in removed_items:
                continue
            removed_items.add(key)
            for user in item_adj.pop(key):
                partners = user_adj[user]
                partners.discard(key)
                if len(partners) < k and user not in removed_users:
                    queue.append(("u", user))

    kept = [r for r in raw if r.user_key not in removed_users and r.item_key not in removed_items]
    if not kept:
        raise EmptyAfterFilter(f"nothing survives the {k}-core filter")
    return kept


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Indexed, de-duplicated user-item pairs.

    A dataset produced by :func:`index_dataset` has every id present in at
    least one pair. Split views (``train``/``validation``/``test``) share the
    parent's id space, so some ids may have no pairs in a view.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    user_keys: tuple[str, ...]
    item_keys: tuple[str, ...]
    _user_index: dict = field(repr=False)
    _item_index: dict = field(repr=False)
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @classmethod
    def from_pairs(cls, num_users, num_items, users, items, user_keys=None, item_keys=None):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape or users.ndim != 1:
            raise ValueError("users and items must be 1-d arrays of equal length")
        if len(users) and (users.min() < 0 or users.max() >= num_users or items.min() < 0 or items.max() >= num_items):
            raise ValueError("id out of range")
        # collapse duplicates, keep first occurrence order
        flat = users * num_items + items
        _, first = np.unique(flat, return_index=True)
        first.sort()
        users, items = users[first], items[first]

        order = np.lexsort((items, users))
        counts = np.bincount(users, minlength=num_users)
        indptr = np.zeros(num_users + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        if user_keys is None:
            user_keys = tuple(str(u) for u in range(num_users))
        if item_keys is None:
            item_keys = tuple(str(i) for i in range(num_items))
        users.flags.writeable = False
        items.flags.writeable = False
        indices = items[order]
        indices.flags.writeable = False
        return cls(
            num_users=int(num_users),
            num_items=int(num_items),
            users=users,
            items=items,
            user_keys=tuple(user_keys),
            item_keys=tuple(item_keys),
            _user_index={k: n for n, k in enumerate(user_keys)},
            _item_index={k: n for n, k in enumerate(item_keys)},
            indptr=indptr,
            indices=indices,
        )

    def __len__(self) -> int:
        return len(self.users)

    @property
    def num_pairs(self) -> int:
        return len(self.users)

    def positives(self, user: int) -> np.ndarray:
        """Sorted item ids of ``user``."""
        return self.indices[self.indptr[user]:self.indptr[user + 1]]

    @property
    def user_positives(self) -> list[np.ndarray]:
        return [self.positives(u) for u in range(self.num_users)]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def pair_set(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def user_id(self, key: str) -> int:
        return self._user_index[key]

    def item_id(self, key: str) -> int:
        return self._item_index[key]

    def union(self, other: "InteractionDataset") -> "InteractionDataset":
        if (other.num_users, other.num_items) != (self.num_users, self.num_items):
            raise ValueError("datasets live in different id spaces")
        return self.view(np.concatenate([self.users, other.users]), np.concatenate([self.items, other.items]))

    def view(self, users, items) -> "InteractionDataset":
        """A dataset over a subset of pairs sharing this id space."""
        return InteractionDataset.from_pairs(
            self.num_users, self.num_items, users, items, self.user_keys, self.item_keys
        )


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: InteractionDataset
    validation: InteractionDataset
    test: InteractionDataset
    seed: int

    def known_positives(self) -> InteractionDataset:
        """Train plus validation pairs: the mask for test-time ranking."""
        return self.train.union(self.validation)

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items


def index_dataset(raw: Sequence[RawInteraction]) -> InteractionDataset:
    """Assign contiguous ids in first-seen order and collapse duplicate pairs."""
    if not raw:
        raise EmptyInput("no interactions to index")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users = np.empty(len(raw), dtype=np.int64)
    items = np.empty(len(raw), dtype=np.int64)
    for n, r in enumerate(raw):
        users[n] = user_index.setdefault(r.user_key, len(user_index))
        items[n] = item_index.setdefault(r.item_key, len(item_index))
    return InteractionDataset.from_pairs(
        len(user_index), len(item_index), users, items, tuple(user_index), tuple(item_index)
    )


def _holdout_count(n: int, frac: float) -> int:
    if frac <= 0 or n < 2:
        return 0
    return min(math.ceil(frac * n), n - 1)


def split_dataset(ds: InteractionDataset, test_frac: float = 0.2, val_frac: float = 0.1,
                  seed: int = 0) -> SplitDataset:
    """Per-user random split into train / validation / test.

    Each user sends ``ceil(test_frac * |I_u|)`` pairs to test, then
    ``ceil(val_frac * remaining)`` of the rest to validation. At least one
    train pair is always retained; users with a single pair keep it in train.
    """
    if not (0 <= test_frac < 1 and 0 <= val_frac < 1):
        raise ValueError("test_frac and val_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    parts: dict[str, tuple[list, list]] = {"train": ([], []), "validation": ([], []), "test": ([], [])}
    for u in range(ds.num_users):
        pos = ds.positives(u)
        if len(pos) == 0:
            continue
        pos = pos[rng.permutation(len(pos))]
        n_test = _holdout_count(len(pos), test_frac)
        test, rest = pos[:n_test], pos[n_test:]
        n_val = _holdout_count(len(rest), val_frac)
        val, train = rest[:n_val], rest[n_val:]
        for name, chunk in (("train", train), ("validation", val), ("test", test)):
            parts[name][0].extend([u] * len(chunk))
            parts[name][1].extend(chunk.tolist())
    views = {name: ds.view(np.array(us, dtype=np.int64), np.array(its, dtype=np.int64))
             for name, (us, its) in parts.items()}
    return SplitDataset(seed=seed, **views)


def dataset_stats(ds: InteractionDataset) -> tuple[int, int, int, float]:
    """``(users, items, interactions, density)``."""
    n = ds.num_pairs
    return ds.num_users, ds.num_items, n, n / (ds.num_users * ds.num_items)


def preprocess(path, format: str = "tsv", min_rating: float = 3.0, k_core: int = 10) -> InteractionDataset:
    """Load, rating-filter, k-core filter and index a raw interaction file."""
    raw = load_interactions(path, format)
    if not raw:
        raise EmptyInput(f"{path} holds no interactions")
    raw = filter_ratings(raw, min_rating)
    if k_core > 1:
        raw = k_core_filter(raw, k_core)
    return index_dataset(raw)
