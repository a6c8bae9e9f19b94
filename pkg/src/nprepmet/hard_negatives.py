"""Hard-negative selection from support proposals.

Negative embeddings are grouped with Ng-Jordan-Weiss spectral clustering
on their dot-product affinities; one proposal per cluster is kept, either
the cluster medoid (``CLUSTER_MIN``) or a random member (``CLUSTER_RD``).
``RD`` skips clustering and samples uniformly.
"""

from __future__ import annotations

import enum
import warnings

import numpy as np
from sklearn.cluster import KMeans

from .errors import ConfigError


class SelectionStrategy(enum.Enum):
    RD = "rd"
    CLUSTER_RD = "cluster-rd"
    CLUSTER_MIN = "cluster-min"

    @classmethod
    def parse(cls, value) -> "SelectionStrategy":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise ConfigError(f"unknown strategy {value!r}; choose from {[m.value for m in cls]}")


def build_affinity(neg_embeddings) -> np.ndarray:
    e = np.atleast_2d(np.asarray(neg_embeddings, dtype=np.float64))
    s = e @ e.T
    # exact symmetry regardless of BLAS summation order
    return 0.5 * (s + s.T)


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` with negatives clamped and the diagonal zeroed.

    Isolated points (zero degree) get a unit self-loop, so each one forms
    its own zero-eigenvalue component like any other disconnected block.
    """
    a = np.clip(np.asarray(affinity, dtype=np.float64), 0.0, None)
    np.fill_diagonal(a, 0.0)
    isolated = a.sum(axis=1) == 0.0
    a[isolated, isolated] = 1.0
    deg = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(len(a)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def spectral_embedding(affinity: np.ndarray, k: int):
    """Row-normalized eigenvectors of the ``k`` smallest Laplacian eigenvalues.

    Returns ``(rows, eigenvalues, eigenvectors)``.
    """
    lap = normalized_laplacian(affinity)
    vals, vecs = np.linalg.eigh(lap)
    vals, vecs = vals[:k], vecs[:, :k]
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    rows = vecs / np.where(norms > 0.0, norms, 1.0)
    return rows, vals, vecs


def spectral_cluster(affinity: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    affinity = np.asarray(affinity, dtype=np.float64)
    m = len(affinity)
    if not 1 <= k <= m:
        raise ConfigError(f"need 1 <= k <= M, got k={k}, M={m}")
    if k == m:
        return np.arange(m)
    if k == 1:
        return np.zeros(m, dtype=np.int64)
    rows, _, _ = spectral_embedding(affinity, k)
    with warnings.catch_warnings():
        # duplicate rows can leave fewer distinct points than clusters
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, tol=1e-9,
                    random_state=seed % (2 ** 32), algorithm="lloyd")
        labels = km.fit_predict(rows)
    return _canonical_labels(labels)


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters in order of first appearance."""
    mapping = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(int(lab), len(mapping))
    return out


def cluster_medoid(embeddings: np.ndarray, members: np.ndarray) -> int:
    """Member with minimal mean Euclidean distance to the other members."""
    if len(members) == 1:
        return int(members[0])
    pts = embeddings[members]
    d = np.sqrt(np.maximum(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1), 0.0))
    mean = d.sum(axis=1) / (len(members) - 1)
    return int(members[np.argmin(mean)])


def select_hard_negatives(neg_embeddings, k: int, strategy=SelectionStrategy.CLUSTER_MIN, seed: int = 0) -> np.ndarray:
    """Indices of at most ``k`` selected negatives, in ascending order."""
    strategy = SelectionStrategy.parse(strategy)
    if k < 1:
        raise ConfigError("k must be >= 1")
    e = np.asarray(neg_embeddings, dtype=np.float64)
    m = len(e)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    if m <= k:
        return np.arange(m)
    rng = np.random.default_rng(seed)
    if strategy is SelectionStrategy.RD:
        return np.sort(rng.choice(m, size=k, replace=False))
    labels = spectral_cluster(build_affinity(e), k, seed)
    picks = []
    for c in range(labels.max() + 1):
        members = np.flatnonzero(labels == c)
        if strategy is SelectionStrategy.CLUSTER_MIN:
            picks.append(cluster_medoid(e, members))
        else:
            picks.append(int(rng.choice(members)))
    return np.sort(np.array(picks, dtype=np.int64))
