"""Numeric operations on descriptors: GeM pooling, classification loss,
L2 normalization, PCA reduction and exact nearest-neighbour search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DescriptorError, RankError

GEM_DEFAULT_P = 3.0


def gem_pool(feature_map, p: float = GEM_DEFAULT_P) -> np.ndarray:
    """Generalized-mean pooling of per-channel activations.

    ``feature_map`` is either a (C, ...) array or a sequence of C activation
    arrays (channels may differ in size). Component ``c`` of the result is
    ``mean(x ** p) ** (1 / p)`` over the activations of channel ``c``.
    p = 1 gives average pooling; large p approaches max pooling.
    """
    if not p >= 1:
        raise DescriptorError(f"GeM power must be >= 1, got {p}")
    if isinstance(feature_map, np.ndarray) and feature_map.dtype != object:
        channels = [np.ravel(c) for c in feature_map.reshape(feature_map.shape[0], -1)]
    else:
        channels = [np.ravel(np.asarray(c, dtype=float)) for c in feature_map]
    out = np.empty(len(channels))
    for i, x in enumerate(channels):
        if x.size == 0:
            raise DescriptorError(f"channel {i} has no activations")
        if np.any(x < 0):
            raise DescriptorError(f"channel {i} has negative activations")
        m = x.max()
        if m == 0:
            out[i] = 0.0
            continue
        # factor out the max so large p does not overflow
        out[i] = m * np.mean((x / m) ** p) ** (1.0 / p)
    return out


@dataclass(frozen=True, eq=False)
class ClassifierHead:
    """Linear classification head; column ``j`` of ``W`` holds class ``j``'s weights.

    ``margin == 0 and scale == 1`` gives plain softmax cross-entropy on the raw
    logits ``W.T @ x + b``. Any other setting switches to the additive angular
    margin form on L2-normalized features and weights.
    """

    W: np.ndarray
    b: np.ndarray
    margin: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if b.shape[0] != W.shape[1]:
            raise DescriptorError(f"bias length {b.shape[0]} != class count {W.shape[1]}")
        if self.margin < 0 or not self.scale > 0:
            raise DescriptorError("margin must be >= 0 and scale > 0")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @classmethod
    def arcface(cls, W, b=None, margin: float = 0.5, scale: float = 64.0) -> "ClassifierHead":
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return cls(W, np.zeros(W.shape[1]) if b is None else b, margin, scale)

    @property
    def angular(self) -> bool:
        return self.margin != 0.0 or self.scale != 1.0

    def logits(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if not self.angular:
            return x @ self.W + self.b
        xn = x / np.linalg.norm(x, axis=1, keepdims=True)
        Wn = self.W / np.linalg.norm(self.W, axis=0, keepdims=True)
        cos = np.clip(xn @ Wn, -1.0, 1.0)
        rows = np.arange(len(y))
        target = np.cos(np.arccos(cos[rows, y]) + self.margin)
        cos = cos.copy()
        cos[rows, y] = target
        return self.scale * cos + self.b


def classification_loss(batch, head: ClassifierHead) -> float:
    """Mean softmax cross-entropy of ``(descriptor, class id)`` pairs under ``head``."""
    if len(batch) == 0:
        raise DescriptorError("empty batch")
    x = np.array([np.asarray(d, dtype=float) for d, _ in batch])
    y = np.array([int(c) for _, c in batch])
    if x.ndim != 2 or x.shape[1] != head.W.shape[0]:
        raise DescriptorError(f"descriptor dim {x.shape[-1]} != head dim {head.W.shape[0]}")
    n = head.W.shape[1]
    if np.any(y < 0) or np.any(y >= n):
        raise DescriptorError(f"class ids must lie in [0, {n})")
    z = head.logits(x, y)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(len(y)), y]
    return float(max(0.0, nll.mean()))


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not n > eps:
        raise DescriptorError(f"cannot normalize a vector of norm {n:g}")
    return v / n


def l2_normalize_rows(V: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    n = np.linalg.norm(V, axis=1, keepdims=True)
    if np.any(n <= eps):
        raise DescriptorError("cannot normalize a near-zero row")
    return V / n


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (D, D') orthonormal columns, descending variance
    variances: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def out_dim(self) -> int:
        return self.basis.shape[1]


def pca_fit(descriptors: Sequence, out_dim: int | None = None, rank_tol: float = 1e-10) -> PcaModel:
    """Fit PCA by eigendecomposition of the sample covariance.

    ``out_dim=None`` keeps the input dimension. Each basis column is signed so
    its first non-negligible component is positive.
    """
    X = np.asarray(descriptors, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DescriptorError("PCA needs at least 2 samples")
    n, D = X.shape
    k = D if out_dim is None else int(out_dim)
    if k < 1 or k > D or k > n:
        raise DescriptorError(f"out_dim={k} must be in [1, min(D={D}, n={n})]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(float(evals[0]), 0.0)
    rank = int(np.sum(evals > rank_tol * scale)) if scale > 0 else 0
    if k > rank:
        raise RankError(f"requested {k} components but the data has rank {rank}")
    basis = evecs[:, :k].copy()
    for j in range(k):
        col = basis[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            basis[:, j] = -col
    return PcaModel(mean=mean, basis=basis, variances=evals[:k].copy())


def pca_apply(model: PcaModel, v) -> np.ndarray:
    """Project vector(s) onto the principal basis: ``basis.T @ (v - mean)``."""
    v = np.asarray(v, dtype=float)
    return (v - model.mean) @ model.basis


def knn_search(query, database, k: int) -> list[tuple[int, float]]:
    """Exact k nearest neighbours by Euclidean distance.

    Results are sorted by ascending distance with ties going to the lower
    index; ``k`` is capped at the database size.
    """
    db = np.asarray(database, dtype=float)
    if db.ndim != 2 or db.shape[0] == 0:
        raise DescriptorError("empty database")
    if k < 1:
        raise DescriptorError("k must be >= 1")
    q = np.asarray(query, dtype=float).reshape(-1)
    if q.shape[0] != db.shape[1]:
        raise DescriptorError(f"query dim {q.shape[0]} != database dim {db.shape[1]}")
    d = np.sqrt(np.sum((db - q) ** 2, axis=1))
    k = min(k, db.shape[0])
    if k < db.shape[0]:
        # argpartition leaves tie order unspecified; widen to every index at the
        # cut distance before the stable sort.
        cut = np.partition(d, k - 1)[k - 1]
        cand = np.flatnonzero(d <= cut)
    else:
        cand = np.arange(db.shape[0])
    order = cand[np.lexsort((cand, d[cand]))][:k]
    return [(int(i), float(d[i])) for i in order]


def squared_distances(queries: np.ndarray, database: np.ndarray) -> np.ndarray:
    """(N, M) squared Euclidean distances via the expanded quadratic form, clipped at 0."""
    Q = np.asarray(queries, dtype=np.float64)
    B = np.asarray(database, dtype=np.float64)
    d2 = Q @ B.T
    d2 *= -2.0
    d2 += np.einsum("ij,ij->i", B, B)[None, :]
    d2 += np.einsum("ij,ij->i", Q, Q)[:, None]
    np.maximum(d2, 0.0, out=d2)
    return d2


def two_nearest_sq(d2: np.ndarray):
    """Two smallest entries per row of a squared-distance matrix.

    Returns ``(idx (N, 2), dist (N, 2))`` with Euclidean distances. Ties go
    to the lower column. ``d2`` is left unchanged.
    """
    n, m = d2.shape
    idx = np.full((n, 2), -1, dtype=np.int64)
    dist = np.full((n, 2), np.inf)
    if n == 0 or m == 0:
        return idx, dist
    rows = np.arange(n)
    i1 = np.argmin(d2, axis=1)
    p1 = d2[rows, i1]
    idx[:, 0] = i1
    dist[:, 0] = np.sqrt(p1)
    if m > 1:
        d2[rows, i1] = np.inf
        i2 = np.argmin(d2, axis=1)
        idx[:, 1] = i2
        dist[:, 1] = np.sqrt(d2[rows, i2])
        d2[rows, i1] = p1
    return idx, dist


def two_nearest(queries: np.ndarray, database: np.ndarray, chunk: int = 2048):
    """Indices and Euclidean distances of the two nearest database rows for each query.

    For a single-row database the second distance is ``inf`` and its index -1.
    Distances come from the expanded quadratic form, so they are accurate to
    roughly 1e-7 relative; use :func:`knn_search` when exactness matters.
    """
    Q = np.asarray(queries, dtype=np.float64)
    B = np.asarray(database, dtype=np.float64)
    nq = Q.shape[0]
    idx = np.full((nq, 2), -1, dtype=np.int64)
    dist = np.full((nq, 2), np.inf)
    if nq == 0 or B.shape[0] == 0:
        return idx, dist
    for s in range(0, nq, chunk):
        idx[s : s + chunk], dist[s : s + chunk] = two_nearest_sq(squared_distances(Q[s : s + chunk], B))
    return idx, dist


def ratio_test(dist: np.ndarray, ratio: float) -> np.ndarray:
    """Boolean mask ``d1 <= ratio * d2`` for rows of a (N, 2) distance array."""
    d1, d2 = dist[:, 0], dist[:, 1]
    return np.isfinite(d1) & (d1 <= ratio * d2)


__all__ = [
    "GEM_DEFAULT_P",
    "ClassifierHead",
    "PcaModel",
    "classification_loss",
    "gem_pool",
    "knn_search",
    "l2_normalize",
    "l2_normalize_rows",
    "pca_apply",
    "pca_fit",
    "ratio_test",
    "squared_distances",
    "two_nearest",
    "two_nearest_sq",
]
