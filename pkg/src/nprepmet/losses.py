"""Triplet losses over NP-embeddings, cross-entropy on the class posterior,
and the combined batch objective with analytic gradients.

Conventions: the hinge is treated as flat at exactly zero, and argmin ties
resolve to the lowest representative index (lowest flat ``(class, mode)``
index for the cross-class term).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed_net import NPEmbedding
from .errors import ConfigError, UsageError
from .geometry import NEGATIVE, POSITIVE
from .representatives import ProbConfig, RepBank, pairwise_distances


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    ce_weight: float = 1.0
    triplet_weight: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.ce_weight < 0 or self.triplet_weight < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    triplet: float
    cross_entropy: float
    total: float


@dataclass
class TripletResult:
    loss: float
    grad_emb: np.ndarray
    grad_pos: np.ndarray
    grad_neg: np.ndarray


def _unit_diff(x: np.ndarray, r: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Gradient of ``||x - r||`` w.r.t. ``x``; zero where the distance is zero."""
    safe = np.where(d > 0.0, d, 1.0)[:, None]
    return np.where((d > 0.0)[:, None], (x - r) / safe, 0.0)


def _unit_diff_grid(x: np.ndarray, r: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Like :func:`_unit_diff` for ``x (B, e)`` against ``r (B, N, e)``."""
    safe = np.where(d > 0.0, d, 1.0)[..., None]
    return np.where((d > 0.0)[..., None], (x[:, None, :] - r) / safe, 0.0)


def _triplet_core(x: np.ndarray, same: np.ndarray, other: np.ndarray, cls: np.ndarray, alpha: float):
    """Vectorized triplet hinge for rows of ``x`` labeled ``cls``.

    ``same`` is the bank matching the embedding's role (positive bank for
    E^p), ``other`` the opposite-role bank. Returns per-row losses,
    gradients w.r.t. ``x`` and sparse representative updates.
    """
    b, n = len(x), same.shape[0]
    if n < 2:
        raise ConfigError("triplet losses need at least two classes")
    rows = np.arange(b)
    d_same = pairwise_distances(x, same)  # (B, N, K)
    d_other = pairwise_distances(x, other)
    j_a = np.argmin(d_same[rows, cls], axis=1)
    j_b = np.argmin(d_other[rows, cls], axis=1)
    masked = d_same.copy()
    masked[rows, cls] = np.inf
    flat = np.argmin(masked.reshape(b, -1), axis=1)
    i_c, j_c = np.divmod(flat, same.shape[1])
    da = d_same[rows, cls, j_a]
    db = d_other[rows, cls, j_b]
    dc = d_same[rows, i_c, j_c]
    hinge = da - 0.5 * (db + dc) + alpha
    active = (hinge > 0.0).astype(np.float64)
    loss = np.where(active > 0.0, hinge, 0.0)

    ga = _unit_diff(x, same[cls, j_a], da)
    gb = _unit_diff(x, other[cls, j_b], db)
    gc = _unit_diff(x, same[i_c, j_c], dc)
    act = active[:, None]
    grad_x = act * (ga - 0.5 * gb - 0.5 * gc)
    # (bank, class, mode, per-row gradient on that representative)
    rep_updates = [
        ("same", cls, j_a, -act * ga),
        ("other", cls, j_b, 0.5 * act * gb),
        ("same", i_c, j_c, 0.5 * act * gc),
    ]
    return loss, grad_x, rep_updates


def _scatter(updates, same_grad, other_grad, weights):
    for which, ci, cj, g in updates:
        target = same_grad if which == "same" else other_grad
        np.add.at(target, (ci, cj), weights[:, None] * g)


def triplet_pos(emb: NPEmbedding, bank: RepBank, true_class: int, alpha: float = 0.5) -> TripletResult:
    """Hinge on the positive embedding of a positive proposal."""
    x = np.atleast_2d(emb.e_pos)
    cls = np.array([true_class])
    loss, gx, upd = _triplet_core(x, bank.pos, bank.neg, cls, alpha)
    gp, gn = np.zeros_like(bank.pos), np.zeros_like(bank.neg)
    _scatter(upd, gp, gn, np.ones(1))
    return TripletResult(float(loss[0]), gx[0], gp, gn)


def triplet_neg(emb: NPEmbedding, bank: RepBank, true_class: int, alpha: float = 0.5) -> TripletResult:
    """Hinge on the negative embedding of a negative proposal (roles swapped)."""
    x = np.atleast_2d(emb.e_neg)
    cls = np.array([true_class])
    loss, gx, upd = _triplet_core(x, bank.neg, bank.pos, cls, alpha)
    gp, gn = np.zeros_like(bank.pos), np.zeros_like(bank.neg)
    _scatter(upd, gn, gp, np.ones(1))
    return TripletResult(float(loss[0]), gx[0], gp, gn)


def cross_entropy(posterior: np.ndarray, target: int):
    """``-log posterior[target]`` and its gradient w.r.t. the posterior vector."""
    posterior = np.asarray(posterior, dtype=np.float64)
    if not 0 <= target < len(posterior):
        raise UsageError(f"target {target} outside [0, {len(posterior)})")
    grad = np.zeros_like(posterior)
    grad[target] = -1.0 / posterior[target]
    return float(-np.log(posterior[target])), grad


@dataclass
class BatchGrads:
    e_neg: np.ndarray
    e_pos: np.ndarray
    reps_pos: np.ndarray
    reps_neg: np.ndarray


def batch_loss(
    e_neg: np.ndarray,
    e_pos: np.ndarray,
    kinds: np.ndarray,
    classes: np.ndarray,
    bank: RepBank,
    prob_cfg: ProbConfig,
    loss_cfg: LossConfig,
):
    """Combined objective over a batch of labeled proposal embeddings.

    ``kinds`` uses the geometry label codes; ignored rows contribute
    nothing. Positive rows add the positive triplet and cross-entropy to
    their class, negative rows the negative triplet and cross-entropy to
    the background. Each term is averaged over contributing rows.

    Returns ``(LossBreakdown, BatchGrads)``.
    """
    e_neg = np.atleast_2d(np.asarray(e_neg, dtype=np.float64))
    e_pos = np.atleast_2d(np.asarray(e_pos, dtype=np.float64))
    kinds = np.asarray(kinds)
    classes = np.asarray(classes, dtype=np.int64)
    pos_rows = np.flatnonzero(kinds == POSITIVE)
    neg_rows = np.flatnonzero(kinds == NEGATIVE)
    n_contrib = len(pos_rows) + len(neg_rows)
    if n_contrib == 0:
        raise UsageError("batch has no positive or negative proposals")
    if bank.replaced:
        raise UsageError("training requires a dense representative bank")
    n_classes = bank.n_classes

    g_neg = np.zeros_like(e_neg)
    g_pos = np.zeros_like(e_pos)
    g_rp = np.zeros_like(bank.pos)
    g_rn = np.zeros_like(bank.neg)
    w_trip = loss_cfg.triplet_weight / n_contrib
    w_ce = loss_cfg.ce_weight / n_contrib

    trip_sum = 0.0
    if len(pos_rows):
        loss, gx, upd = _triplet_core(e_pos[pos_rows], bank.pos, bank.neg, classes[pos_rows], loss_cfg.alpha)
        trip_sum += loss.sum()
        g_pos[pos_rows] += w_trip * gx
        _scatter(upd, g_rp, g_rn, np.full(len(pos_rows), w_trip))
    if len(neg_rows):
        loss, gx, upd = _triplet_core(e_neg[neg_rows], bank.neg, bank.pos, classes[neg_rows], loss_cfg.alpha)
        trip_sum += loss.sum()
        g_neg[neg_rows] += w_trip * gx
        _scatter(upd, g_rn, g_rp, np.full(len(neg_rows), w_trip))

    rows = np.concatenate([pos_rows, neg_rows])
    targets = np.concatenate([classes[pos_rows], np.full(len(neg_rows), n_classes)])
    xp, xn = e_pos[rows], e_neg[rows]
    r = np.arange(len(rows))
    dp_all = pairwise_distances(xp, bank.pos)
    dn_all = pairwise_distances(xn, bank.neg)
    jp = np.argmin(dp_all, axis=2)
    jn = np.argmin(dn_all, axis=2)
    dp = np.take_along_axis(dp_all, jp[..., None], axis=2)[..., 0]
    dn = np.take_along_axis(dn_all, jn[..., None], axis=2)[..., 0]
    two_s2 = 2.0 * prob_cfg.sigma ** 2
    logits = -(dp - prob_cfg.beta * dn + 2.0 * prob_cfg.beta) / two_s2
    ext = np.concatenate([logits, np.full((len(rows), 1), np.log(prob_cfg.background_score))], axis=1)
    shift = ext.max(axis=1, keepdims=True)
    log_z = shift[:, 0] + np.log(np.exp(ext - shift).sum(axis=1))
    ce = log_z - ext[r, targets]
    q = np.exp(ext - log_z[:, None])
    g_logit = q.copy()
    g_logit[r, targets] -= 1.0
    g_logit = g_logit[:, :n_classes] * w_ce
    g_dp = -g_logit / two_s2
    g_dn = prob_cfg.beta * g_logit / two_s2
    cgrid = np.broadcast_to(np.arange(n_classes), jp.shape)
    up = _unit_diff_grid(xp, bank.pos[cgrid, jp], dp) * g_dp[..., None]
    un = _unit_diff_grid(xn, bank.neg[cgrid, jn], dn) * g_dn[..., None]
    g_pos[rows] += up.sum(axis=1)
    g_neg[rows] += un.sum(axis=1)
    np.add.at(g_rp, (cgrid, jp), -up)
    np.add.at(g_rn, (cgrid, jn), -un)

    trip_mean = trip_sum / n_contrib
    ce_mean = ce.sum() / n_contrib
    total = loss_cfg.ce_weight * ce_mean + loss_cfg.triplet_weight * trip_mean
    breakdown = LossBreakdown(triplet=float(trip_mean), cross_entropy=float(ce_mean), total=float(total))
    return breakdown, BatchGrads(g_neg, g_pos, g_rp, g_rn)
