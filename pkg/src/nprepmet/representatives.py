"""Positive / negative representative banks and distance-based class scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed_net import NPEmbedding, l2_normalize
from .errors import ConfigError

# largest Euclidean distance between unit vectors; stands in for a missing
# negative set so the score reduces to positive-only scoring
MISSING_NEG_DISTANCE = 2.0


@dataclass(frozen=True)
class ProbConfig:
    beta: float = 0.3
    sigma: float = 0.5
    background_score: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if self.sigma <= 0.0:
            raise ConfigError("sigma must be positive")
        if self.background_score <= 0.0:
            raise ConfigError("background_score must be positive")


@dataclass
class RepBank:
    """``N x K x e`` banks of unit representatives, optionally ragged per class.

    ``replaced`` maps a class id to ``(pos, neg)`` arrays of shape
    ``(m, e)`` that override the dense tensors for that class.
    """

    pos: np.ndarray
    neg: np.ndarray
    replaced: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.neg = np.asarray(self.neg, dtype=np.float64)
        if self.pos.ndim != 3 or self.pos.shape != self.neg.shape:
            raise ConfigError(f"bank tensors must both be N x K x e, got {self.pos.shape} / {self.neg.shape}")

    @property
    def n_classes(self) -> int:
        return self.pos.shape[0]

    @property
    def n_reps(self) -> int:
        return self.pos.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.pos.shape[2]

    @classmethod
    def random(cls, n_classes: int, n_reps: int, embed_dim: int, seed: int) -> "RepBank":
        rng = np.random.default_rng(seed)
        pos = l2_normalize(rng.standard_normal((n_classes, n_reps, embed_dim)))[0]
        neg = l2_normalize(rng.standard_normal((n_classes, n_reps, embed_dim)))[0]
        return cls(pos, neg)

    @classmethod
    def empty(cls, n_classes: int, embed_dim: int) -> "RepBank":
        """A bank with no dense modes; every class must be installed with
        :func:`replace_class_reps` before querying."""
        z = np.zeros((n_classes, 0, embed_dim))
        return cls(z, z.copy())

    def class_reps(self, class_id: int):
        if class_id in self.replaced:
            return self.replaced[class_id]
        return self.pos[class_id], self.neg[class_id]

    def renormalize(self) -> None:
        self.pos[...] = l2_normalize(self.pos)[0]
        self.neg[...] = l2_normalize(self.neg)[0]

    def copy(self) -> "RepBank":
        return RepBank(self.pos.copy(), self.neg.copy(),
                       {c: (p.copy(), n.copy()) for c, (p, n) in self.replaced.items()})


@dataclass(frozen=True)
class ClassDistances:
    """Per-class minimal distances; arrays are ``(N,)`` or ``(B, N)``.

    ``neg_argmin`` is -1 where a class has no negative representatives.
    """

    d_pos_min: np.ndarray
    d_neg_min: np.ndarray
    pos_argmin: np.ndarray
    neg_argmin: np.ndarray


def pairwise_distances(x: np.ndarray, reps: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``x (B, e)`` and ``reps (..., e)``."""
    diff = x.reshape((x.shape[0],) + (1,) * (reps.ndim - 1) + (x.shape[1],)) - reps[None]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _min_over(x: np.ndarray, reps: np.ndarray):
    if len(reps) == 0:
        return np.full(len(x), MISSING_NEG_DISTANCE), np.full(len(x), -1, dtype=np.int64)
    d = pairwise_distances(x, reps)
    j = np.argmin(d, axis=1)
    return d[np.arange(len(x)), j], j


def min_distances(bank: RepBank, emb: NPEmbedding) -> ClassDistances:
    e_pos = np.asarray(emb.e_pos, dtype=np.float64)
    e_neg = np.asarray(emb.e_neg, dtype=np.float64)
    squeeze = e_pos.ndim == 1
    e_pos, e_neg = np.atleast_2d(e_pos), np.atleast_2d(e_neg)
    if e_pos.shape[1] != bank.embed_dim or e_neg.shape[1] != bank.embed_dim:
        raise ConfigError(f"embedding dim {e_pos.shape[1]} does not match bank dim {bank.embed_dim}")
    b, n = len(e_pos), bank.n_classes
    out = [np.empty((b, n)), np.empty((b, n)), np.empty((b, n), dtype=np.int64), np.empty((b, n), dtype=np.int64)]
    dense = [c for c in range(n) if c not in bank.replaced]
    if dense:
        if bank.n_reps == 0:
            raise ConfigError(f"classes {dense} have no representatives installed")
        dp = pairwise_distances(e_pos, bank.pos[dense])
        dn = pairwise_distances(e_neg, bank.neg[dense])
        out[2][:, dense] = np.argmin(dp, axis=2)
        out[3][:, dense] = np.argmin(dn, axis=2)
        out[0][:, dense] = np.min(dp, axis=2)
        out[1][:, dense] = np.min(dn, axis=2)
    for c, (pos, neg) in bank.replaced.items():
        out[0][:, c], out[2][:, c] = _min_over(e_pos, pos)
        out[1][:, c], out[3][:, c] = _min_over(e_neg, neg)
    if squeeze:
        out = [o[0] for o in out]
    return ClassDistances(*out)


def class_logits(dists: ClassDistances, cfg: ProbConfig) -> np.ndarray:
    """Log of the unnormalized class probability."""
    numer = dists.d_pos_min - cfg.beta * dists.d_neg_min + 2.0 * cfg.beta
    return -numer / (2.0 * cfg.sigma ** 2)


def class_probability(dists: ClassDistances, cfg: ProbConfig) -> np.ndarray:
    return np.exp(class_logits(dists, cfg))


def class_posterior(p: np.ndarray, cfg: ProbConfig) -> np.ndarray:
    """Normalize class scores against a fixed background score.

    Returns ``N + 1`` entries (classes then background) along the last axis.
    """
    p = np.asarray(p, dtype=np.float64)
    bg = np.full(p.shape[:-1] + (1,), cfg.background_score)
    full = np.concatenate([p, bg], axis=-1)
    return full / full.sum(axis=-1, keepdims=True)


def replace_class_reps(bank: RepBank, class_id: int, pos_vectors, neg_vectors) -> None:
    pos = np.asarray(pos_vectors, dtype=np.float64).reshape(-1, bank.embed_dim)
    neg = np.asarray(neg_vectors, dtype=np.float64).reshape(-1, bank.embed_dim)
    if len(pos) == 0:
        raise ConfigError(f"class {class_id} needs at least one positive vector")
    if not 0 <= class_id < bank.n_classes:
        raise ConfigError(f"class id {class_id} outside [0, {bank.n_classes})")
    for name, arr in (("positive", pos), ("negative", neg)):
        if len(arr) and not np.allclose(np.linalg.norm(arr, axis=1), 1.0, atol=1e-9):
            raise ConfigError(f"{name} vectors for class {class_id} are not unit-norm")
    bank.replaced[int(class_id)] = (pos.copy(), neg.copy())
