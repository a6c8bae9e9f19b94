"""Axis-aligned boxes, IoU, proposal labeling and (soft-)NMS.

Boxes use the ``(x1, y1, x2, y2)`` convention in continuous scene units.
The scalar API (:class:`Box`, :func:`iou`, :func:`nms`, ...) works on
Python objects; the ``*_arrays`` helpers do the same arithmetic on
``(n, 4)`` float arrays and are used on hot paths.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

POS_THRESH = 0.7
NEG_BAND = (0.2, 0.3)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ConfigError(f"degenerate box {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_seq(cls, seq) -> "Box":
        return cls(float(seq[0]), float(seq[1]), float(seq[2]), float(seq[3]))


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ConfigError(f"score {self.score} outside [0, 1]")


class LabelKind(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORED = "ignored"


@dataclass(frozen=True)
class ProposalLabel:
    kind: LabelKind
    class_id: Optional[int] = None

    @classmethod
    def positive(cls, class_id: int) -> "ProposalLabel":
        return cls(LabelKind.POSITIVE, int(class_id))

    @classmethod
    def negative(cls, class_id: int) -> "ProposalLabel":
        return cls(LabelKind.NEGATIVE, int(class_id))

    @classmethod
    def ignored(cls) -> "ProposalLabel":
        return cls(LabelKind.IGNORED)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays.

    Performs the same float operations in the same order as :func:`iou`,
    so results agree bit for bit.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(overlap, inter / union, 0.0)


def _check_bands(pos_thresh: float, neg_band: tuple) -> None:
    lo, hi = neg_band
    if not (0.0 <= lo < hi < pos_thresh):
        raise ConfigError(f"need 0 <= {lo} < {hi} < pos_thresh {pos_thresh}")


def best_gt(ious_row: np.ndarray, gt_classes: np.ndarray) -> int:
    """Index of the ground truth with maximal IoU; ties go to the lowest class id."""
    best = ious_row.max()
    tied = np.flatnonzero(ious_row == best)
    return int(tied[np.argmin(gt_classes[tied])])


def label_proposal(
    p: Box,
    gts: Sequence[tuple],
    pos_thresh: float = POS_THRESH,
    neg_band: tuple = NEG_BAND,
) -> ProposalLabel:
    """Label a training proposal against its best-overlapping ground truth."""
    _check_bands(pos_thresh, neg_band)
    if not gts:
        return ProposalLabel.ignored()
    ious = np.array([iou(p, g) for g, _ in gts])
    classes = np.array([c for _, c in gts])
    k = best_gt(ious, classes)
    return _label_from_iou(ious[k], int(classes[k]), pos_thresh, neg_band)


def _label_from_iou(v: float, cls: int, pos_thresh: float, neg_band: tuple) -> ProposalLabel:
    if v > pos_thresh:
        return ProposalLabel.positive(cls)
    if neg_band[0] < v < neg_band[1]:
        return ProposalLabel.negative(cls)
    return ProposalLabel.ignored()


# integer codes used by the array API
IGNORED, POSITIVE, NEGATIVE = 0, 1, 2


def label_proposals_arrays(
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    pos_thresh: float = POS_THRESH,
    neg_band: tuple = NEG_BAND,
):
    """Vectorized :func:`label_proposal`.

    Returns ``(kinds, class_ids, best_ious)``; ``kinds`` holds the integer
    codes ``IGNORED``/``POSITIVE``/``NEGATIVE`` and ``class_ids`` is -1 for
    ignored proposals.
    """
    _check_bands(pos_thresh, neg_band)
    n = len(boxes)
    kinds = np.zeros(n, dtype=np.int64)
    cls = np.full(n, -1, dtype=np.int64)
    best = np.zeros(n)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if n == 0 or len(gt_boxes) == 0:
        return kinds, cls, best
    ious = iou_matrix(boxes, gt_boxes)
    best = ious.max(axis=1)
    # lowest class id among the tied maxima
    masked = np.where(ious == best[:, None], gt_classes[None, :], np.iinfo(np.int64).max)
    best_cls = masked.min(axis=1)
    pos = best > pos_thresh
    neg = (best > neg_band[0]) & (best < neg_band[1])
    kinds[pos] = POSITIVE
    kinds[neg] = NEGATIVE
    cls[pos | neg] = best_cls[pos | neg]
    return kinds, cls, best


def _dets_to_arrays(dets: Sequence[Detection]):
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    return boxes, scores, classes


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy per-class NMS; returns kept indices in (score desc, index) order."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    ious = iou_matrix(boxes, boxes)
    for i in order:
        ok = True
        for j in keep:
            if classes[j] == classes[i] and ious[i, j] > iou_thresh:
                ok = False
                break
        if ok:
            keep.append(int(i))
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.7) -> list:
    if not 0.0 < iou_thresh < 1.0:
        raise ConfigError("iou_thresh must lie in (0, 1)")
    if not dets:
        return []
    boxes, scores, classes = _dets_to_arrays(dets)
    return [dets[i] for i in nms_arrays(boxes, scores, classes, iou_thresh)]


def soft_nms_arrays(
    boxes: np.ndarray,
    scores: np.ndarray,
    classes: np.ndarray,
    iou_thresh: float,
    score_floor: float,
):
    """Linear soft-NMS. Returns ``(indices, rescored)`` in pick order.

    Each round picks the highest remaining score (ties: lowest index) and
    multiplies every remaining same-class score whose IoU with the pick
    exceeds ``iou_thresh`` by ``1 - IoU``. Scores below ``score_floor``
    are dropped.
    """
    scores = np.array(scores, dtype=np.float64)
    classes = np.asarray(classes)
    out_idx, out_scores = [], []
    for c in np.unique(classes):
        members = np.flatnonzero(classes == c)
        cur = scores[members].copy()
        alive = cur >= score_floor
        ious = iou_matrix(boxes[members], boxes[members])
        while alive.any():
            k = int(np.argmax(np.where(alive, cur, -np.inf)))
            alive[k] = False
            out_idx.append(int(members[k]))
            out_scores.append(float(cur[k]))
            hit = alive & (ious[k] > iou_thresh)
            if hit.any():
                cur[hit] = cur[hit] * (1.0 - ious[k, hit])
                alive &= cur >= score_floor
    out_idx = np.array(out_idx, dtype=np.int64)
    out_scores = np.array(out_scores, dtype=np.float64)
    # merging per-class pick sequences by (score desc, index) reproduces the
    # global pick order, since every later pick scores no higher than earlier ones
    order = np.lexsort((out_idx, -out_scores))
    return out_idx[order], out_scores[order]


def soft_nms(dets: Sequence[Detection], iou_thresh: float = 0.6, score_floor: float = 0.001) -> list:
    if not 0.0 < iou_thresh <= 1.0:
        raise ConfigError("iou_thresh must lie in (0, 1]")
    if score_floor < 0.0:
        raise ConfigError("score_floor must be >= 0")
    if not dets:
        return []
    boxes, scores, classes = _dets_to_arrays(dets)
    idx, rescored = soft_nms_arrays(boxes, scores, classes, iou_thresh, score_floor)
    return [Detection(dets[i].box, dets[i].class_id, float(s)) for i, s in zip(idx, rescored)]
