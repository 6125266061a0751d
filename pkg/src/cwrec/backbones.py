"""Embedding backbones: MF, LightGCN and XSimGCL.

All three share one learnable :class:`EmbeddingTable`; the graph backbones
derive their output embeddings from it by linear propagation over the
normalized user-item adjacency, so the backward pass is the same linear map
transposed (the adjacency is symmetric).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset
from .errors import DimensionMismatch, LayerIndexOutOfRange, ZeroNormVector

__all__ = [
    "EmbeddingTable",
    "NormalizedAdjacency",
    "BackboneConfig",
    "Recommender",
    "init_embeddings",
    "build_adjacency",
    "propagate",
    "propagate_backward",
    "score",
    "score_all_items",
    "xsimgcl_contrast_loss",
    "save_checkpoint",
    "load_checkpoint",
]

BACKBONE_KINDS = ("MF", "LightGCN", "XSimGCL")
_DEFAULT_LAYERS = {"MF": 0, "LightGCN": 2, "XSimGCL": 3}


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    user_vecs: np.ndarray
    item_vecs: np.ndarray

    def __post_init__(self):
        if self.user_vecs.ndim != 2 or self.item_vecs.ndim != 2:
            raise DimensionMismatch("embedding matrices must be 2-d")
        if self.user_vecs.shape[1] != self.item_vecs.shape[1]:
            raise DimensionMismatch(
                f"user dim {self.user_vecs.shape[1]} != item dim {self.item_vecs.shape[1]}")
        if self.user_vecs.shape[1] < 1:
            raise DimensionMismatch("d must be >= 1")

    @property
    def d(self) -> int:
        return self.user_vecs.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_vecs.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_vecs.shape[0]

    def stacked(self) -> np.ndarray:
        """Users first, then items: one row per graph node."""
        return np.vstack([self.user_vecs, self.item_vecs])

    @classmethod
    def from_stacked(cls, mat: np.ndarray, num_users: int) -> "EmbeddingTable":
        return cls(mat[:num_users], mat[num_users:])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.user_vecs).all() and np.isfinite(self.item_vecs).all())

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_vecs.copy(), self.item_vecs.copy())


def init_embeddings(num_users: int, num_items: int, d: int = 64, seed: int = 0,
                    scale: Optional[float] = None) -> EmbeddingTable:
    """I.i.d. ``N(0, scale^2)`` entries; ``scale`` defaults to ``0.1 / sqrt(d)``."""
    if d < 1:
        raise DimensionMismatch("d must be >= 1")
    if scale is None:
        scale = 0.1 / np.sqrt(d)
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((num_users + num_items, d)) * scale
    return EmbeddingTable.from_stacked(mat, num_users)


class NormalizedAdjacency:
    """Symmetric ``D^-1/2 A D^-1/2`` over the bipartite train graph, no self loops."""

    def __init__(self, matrix: sp.csr_matrix, num_users: int, num_items: int):
        self.matrix = matrix
        self.num_users = num_users
        self.num_items = num_items

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def __matmul__(self, other: np.ndarray) -> np.ndarray:
        return self.matrix @ other

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def build_adjacency(train: InteractionDataset) -> NormalizedAdjacency:
    nu, ni = train.num_users, train.num_items
    rows = train.users
    cols = train.items + nu
    deg_u = train.user_degrees().astype(np.float64)
    deg_i = train.item_degrees().astype(np.float64)
    vals = 1.0 / np.sqrt(deg_u[train.users] * deg_i[train.items])
    n = nu + ni
    mat = sp.coo_matrix(
        (np.concatenate([vals, vals]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n),
    ).tocsr()
    return NormalizedAdjacency(mat, nu, ni)


def _perturb(mat: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    # sign-aligned random direction with row norm eps
    xi = rng.uniform(size=mat.shape)
    norms = np.linalg.norm(xi, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return mat + eps * np.sign(mat) * (xi / norms)


def propagate(base: EmbeddingTable, adj: Optional[NormalizedAdjacency], layers: int,
              noise_eps: float = 0.0, seed=None) -> tuple[EmbeddingTable, list[EmbeddingTable]]:
    """LightGCN propagation ``E(k+1) = A E(k)`` (plus XSimGCL noise when
    ``noise_eps > 0``); the output is the mean of layers ``0..layers``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if layers < 0:
        raise ValueError("layers must be >= 0")
    e = base.stacked()
    if layers and adj is None:
        raise ValueError("graph propagation needs an adjacency")
    if adj is not None and adj.num_nodes != e.shape[0]:
        raise DimensionMismatch(f"adjacency has {adj.num_nodes} nodes, table has {e.shape[0]} rows")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    per_layer = [e]
    acc = e.copy()
    for _ in range(layers):
        e = adj @ e
        if noise_eps > 0:
            e = _perturb(e, noise_eps, rng)
        per_layer.append(e)
        acc += e
    final = acc / (layers + 1)
    nu = base.num_users
    return (EmbeddingTable.from_stacked(final, nu),
            [EmbeddingTable.from_stacked(m, nu) for m in per_layer])


def propagate_backward(adj: Optional[NormalizedAdjacency], layers: int, grad_final: np.ndarray,
                       grad_layers: Optional[dict[int, np.ndarray]] = None) -> np.ndarray:
    """Gradient w.r.t. the base table (stacked) of a loss depending on the
    mean-of-layers output and, optionally, on individual layers.

    The perturbation is additive and piecewise constant in the base table, so
    it drops out; each layer is ``A^k E(0) + const``. The adjoint is evaluated
    Horner-style: ``g_0 + A (g_1 + A (g_2 + ...))``.
    """
    per = [grad_final / (layers + 1) for _ in range(layers + 1)]
    for k, g in (grad_layers or {}).items():
        if not 0 <= k <= layers:
            raise LayerIndexOutOfRange(f"layer {k} outside 0..{layers}")
        per[k] = per[k] + g
    acc = per[layers]
    for k in range(layers - 1, -1, -1):
        acc = per[k] + (adj @ acc)
    return acc


def _unit_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormVector("cosine score of a zero-norm embedding")
    return mat / norms, norms


def score(emb: EmbeddingTable, u: int, i: int) -> float:
    """Half cosine similarity, in ``[-1/2, 1/2]``."""
    eu, ei = emb.user_vecs[u], emb.item_vecs[i]
    nu, ni = np.linalg.norm(eu), np.linalg.norm(ei)
    if nu == 0 or ni == 0:
        raise ZeroNormVector(f"zero-norm vector for user {u} or item {i}")
    return 0.5 * float(eu @ ei) / (nu * ni)


def score_all_items(emb: EmbeddingTable, u: int) -> np.ndarray:
    uhat, _ = _unit_rows(emb.user_vecs[u][None, :])
    ihat, _ = _unit_rows(emb.item_vecs)
    return 0.5 * (ihat @ uhat[0])


def score_matrix(emb: EmbeddingTable, users: Sequence[int], kind: str = "cosine") -> np.ndarray:
    """Scores of ``users`` against all items: half-cosine or raw dot product."""
    U = emb.user_vecs[np.asarray(users)]
    if kind == "dot":
        return U @ emb.item_vecs.T
    uhat, _ = _unit_rows(U)
    ihat, _ = _unit_rows(emb.item_vecs)
    return 0.5 * (uhat @ ihat.T)


def xsimgcl_contrast_loss(per_layer: Sequence[EmbeddingTable], final: EmbeddingTable,
                          batch_nodes, temp: float = 0.1, weight: float = 0.1,
                          layer: int = 1) -> tuple[float, np.ndarray, np.ndarray]:
    """InfoNCE between the final and ``layer``-th embeddings of ``batch_nodes``.

    Nodes index the stacked (users, then items) space. For node ``n`` the
    positive is its own ``layer`` view and the negatives are the other batch
    nodes' views. Returns ``(loss, grad_final, grad_layer)`` with gradients as
    dense stacked matrices; the loss is the row mean scaled by ``weight``.
    A batch of one node has no negatives and contributes zero.
    """
    if not 0 <= layer < len(per_layer):
        raise LayerIndexOutOfRange(f"contrast layer {layer} outside 0..{len(per_layer) - 1}")
    F = final.stacked()
    L = per_layer[layer].stacked()
    g_final = np.zeros_like(F)
    g_layer = np.zeros_like(L)
    nodes = np.asarray(batch_nodes, dtype=np.int64)
    n = len(nodes)
    if weight == 0 or n < 2:
        return 0.0, g_final, g_layer

    z1, n1 = _unit_rows(F[nodes])
    z2, n2 = _unit_rows(L[nodes])
    logits = z1 @ z2.T / temp
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    denom = ex.sum(axis=1, keepdims=True)
    lse = np.log(denom[:, 0]) + shift[:, 0]
    loss = weight * float(np.mean(lse - np.diag(logits)))

    # d loss / d logits = weight/n * (softmax - I)
    G = (ex / denom - np.eye(n)) * (weight / n)
    dz1 = G @ z2 / temp
    dz2 = G.T @ z1 / temp
    dx1 = (dz1 - np.sum(dz1 * z1, axis=1, keepdims=True) * z1) / n1
    dx2 = (dz2 - np.sum(dz2 * z2, axis=1, keepdims=True) * z2) / n2
    np.add.at(g_final, nodes, dx1)
    np.add.at(g_layer, nodes, dx2)
    return loss, g_final, g_layer


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "MF"
    layers: Optional[int] = None
    noise_eps: float = 0.1
    contrast_layer: int = 1
    contrast_temp: float = 0.1
    contrast_weight: float = 0.1
    d: int = 64
    init_scale: Optional[float] = None

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONE_KINDS}")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.layers is not None and self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.kind == "XSimGCL" and not 0 <= self.contrast_layer <= self.num_layers:
            raise ValueError("contrast_layer must lie in 0..layers")
        if self.contrast_temp <= 0:
            raise ValueError("contrast_temp must be > 0")

    @property
    def num_layers(self) -> int:
        if self.kind == "MF":
            return 0
        return _DEFAULT_LAYERS[self.kind] if self.layers is None else self.layers

    def resolved(self) -> "BackboneConfig":
        return replace(self, layers=self.num_layers)


class Recommender:
    """A backbone bound to its learnable base table and train graph.

    ``score_kind`` is ``"cosine"`` (half-cosine, every loss but BPR) or
    ``"dot"`` (BPR's convention); it applies to both training and ranking.
    """

    def __init__(self, config: BackboneConfig, base: EmbeddingTable,
                 adjacency: Optional[NormalizedAdjacency] = None, score_kind: str = "cosine"):
        if config.num_layers and adjacency is None:
            raise ValueError(f"{config.kind} needs the train adjacency")
        self.config = config
        self.base = base
        self.adjacency = adjacency
        self.score_kind = score_kind

    @property
    def num_users(self) -> int:
        return self.base.num_users

    @property
    def num_items(self) -> int:
        return self.base.num_items

    def forward(self, rng=None, training: bool = False) -> tuple[EmbeddingTable, list[EmbeddingTable]]:
        cfg = self.config
        if cfg.num_layers == 0:
            return self.base, [self.base]
        eps = cfg.noise_eps if (training and cfg.kind == "XSimGCL") else 0.0
        return propagate(self.base, self.adjacency, cfg.num_layers, eps, rng)

    def backward(self, grad_final: np.ndarray, grad_layers=None) -> np.ndarray:
        if self.config.num_layers == 0:
            g = grad_final
            for extra in (grad_layers or {}).values():
                g = g + extra
            return g
        return propagate_backward(self.adjacency, self.config.num_layers, grad_final, grad_layers)

    def embeddings(self) -> EmbeddingTable:
        """Noise-free output embeddings used for ranking."""
        return self.forward(training=False)[0]

    def score_matrix(self, users) -> np.ndarray:
        return score_matrix(self.embeddings(), users, self.score_kind)

    def snapshot(self) -> "Recommender":
        return Recommender(self.config, self.base.copy(), self.adjacency, self.score_kind)


class FrozenScorer:
    """Scores from a fixed output table, e.g. a loaded checkpoint."""

    def __init__(self, table: EmbeddingTable, score_kind: str = "cosine", kind: str = "MF"):
        self.table = table
        self.score_kind = score_kind
        self.kind = kind

    @property
    def num_users(self) -> int:
        return self.table.num_users

    @property
    def num_items(self) -> int:
        return self.table.num_items

    def embeddings(self) -> EmbeddingTable:
        return self.table

    def score_matrix(self, users) -> np.ndarray:
        return score_matrix(self.table, users, self.score_kind)


# Checkpoint layout
#
# text:   line 1  "cwrec-checkpoint 1 text"
#         line 2  "num_users=<n> num_items=<n> d=<n> kind=<backbone> score=<cosine|dot>"
#         then num_users rows and num_items rows of d space-separated reals
#         ("%.{precision}g"; 17 digits is exact for float64)
# binary: the same two header lines, then the stacked (users; items) matrix
#         as little-endian float64, row-major.

_MAGIC = "cwrec-checkpoint 1"


def save_checkpoint(path, table: EmbeddingTable, kind: str = "MF", score_kind: str = "cosine",
                    mode: str = "text", precision: int = 17) -> None:
    header = (f"num_users={table.num_users} num_items={table.num_items} d={table.d} "
              f"kind={kind} score={score_kind}\n")
    mat = table.stacked()
    path = Path(path)
    if mode == "text":
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"{_MAGIC} text\n{header}")
            np.savetxt(fh, mat, fmt=f"%.{precision}g", delimiter=" ")
    elif mode == "binary":
        with open(path, "wb") as fh:
            fh.write(f"{_MAGIC} binary\n{header}".encode("ascii"))
            fh.write(mat.astype("<f8").tobytes(order="C"))
    else:
        raise ValueError(f"unknown checkpoint mode {mode!r}")


def load_checkpoint(path) -> tuple[EmbeddingTable, dict]:
    """Returns the table and the header fields (``kind``, ``score``, sizes)."""
    with open(Path(path), "rb") as fh:
        magic = fh.readline().decode("ascii").split()
        if " ".join(magic[:2]) != _MAGIC or len(magic) != 3:
            raise ValueError(f"{path} is not a cwrec checkpoint")
        meta = dict(kv.split("=", 1) for kv in fh.readline().decode("ascii").split())
        nu, ni, d = int(meta["num_users"]), int(meta["num_items"]), int(meta["d"])
        if magic[2] == "text":
            mat = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        else:
            mat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
        mat = mat.reshape(nu + ni, d)
    return EmbeddingTable.from_stacked(mat.copy(), nu), meta
