"""Few-shot inference: support representatives, query scoring, post-processing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import embed_net
from .errors import ConfigError
from .geometry import POS_THRESH, Box, Detection, iou_matrix, nms_arrays, soft_nms_arrays
from .hard_negatives import SelectionStrategy, select_hard_negatives
from .model import Model
from .representatives import ProbConfig, RepBank, class_probability, min_distances, replace_class_reps
from .synth_world import derive_rng

_SELECT = 61


@dataclass(frozen=True)
class InferenceConfig:
    score_thresh: float = 0.05
    softnms_iou: float = 0.6
    softnms_floor: float = 0.001
    # NMS pre-filter on raw proposals; None disables it
    nms_iou: float | None = None
    pos_thresh: float = POS_THRESH
    neg_band: tuple = (0.2, 0.3)
    fallback_bands: tuple = ((0.1, 0.2), (0.0, 0.1))
    k_negatives: int = 5
    strategy: SelectionStrategy = SelectionStrategy.CLUSTER_MIN
    beta: float = 0.3
    sigma: float = 0.5
    background_score: float = 0.25
    positive_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", SelectionStrategy.parse(self.strategy))
        object.__setattr__(self, "neg_band", tuple(float(v) for v in self.neg_band))
        object.__setattr__(self, "fallback_bands", tuple(tuple(float(v) for v in b) for b in self.fallback_bands))
        if self.k_negatives < 1:
            raise ConfigError("k_negatives must be >= 1")
        if not 0.0 <= self.score_thresh <= 1.0:
            raise ConfigError("score_thresh must lie in [0, 1]")
        ladder = (self.neg_band,) + self.fallback_bands
        for lo, hi in ladder:
            if not 0.0 <= lo < hi <= self.pos_thresh:
                raise ConfigError(f"band ({lo}, {hi}) must satisfy 0 <= lo < hi <= pos_thresh")
        # a fallback ladder descends: each band sits below the previous one
        for (lo_a, _), (_, hi_b) in zip(ladder, ladder[1:]):
            if hi_b > lo_a:
                raise ConfigError("fallback bands must be non-overlapping and ordered downwards")

    @property
    def prob(self) -> ProbConfig:
        return ProbConfig(beta=0.0 if self.positive_only else self.beta, sigma=self.sigma,
                          background_score=self.background_score)

    def with_(self, **kw) -> "InferenceConfig":
        return replace(self, **kw)


@dataclass
class ClassSupport:
    pos_vectors: np.ndarray
    neg_vectors: np.ndarray
    # (scene index, proposal index); proposal -1 is the annotated box itself
    pos_provenance: list = field(default_factory=list)
    neg_provenance: list = field(default_factory=list)
    neg_band: tuple | None = None


@dataclass
class SupportReps:
    classes: list
    per_class: dict

    def bank(self, embed_dim: int) -> RepBank:
        """A ragged bank indexed by position in ``classes``."""
        bank = RepBank.empty(len(self.classes), embed_dim)
        for i, c in enumerate(self.classes):
            s = self.per_class[c]
            replace_class_reps(bank, i, s.pos_vectors, s.neg_vectors)
        return bank


def _band_candidates(ious: np.ndarray, band: tuple) -> np.ndarray:
    lo, hi = band
    return np.flatnonzero((ious > lo) & (ious < hi))


def build_class_support(model: Model, class_id: int, scenes, cfg: InferenceConfig, seed) -> ClassSupport:
    pos_vecs, pos_prov = [], []
    cand_feats, cand_prov, cand_ious = [], [], []
    for si, scene in enumerate(scenes):
        mine = scene.gt_classes == class_id
        if not mine.any():
            raise ConfigError(f"support scene {si} has no ground truth of class {class_id}")
        own = scene.gt_features[mine]
        pos_vecs.append(embed_net.embed(model.net, own).e_pos)
        pos_prov += [(si, -1)] * len(own)
        ious = iou_matrix(scene.boxes, scene.gt_boxes[mine]).max(axis=1)
        hit = np.flatnonzero(ious > cfg.pos_thresh)
        if len(hit):
            pos_vecs.append(embed_net.embed(model.net, scene.features[hit]).e_pos)
            pos_prov += [(si, int(i)) for i in hit]
        cand_feats.append(scene.features)
        cand_ious.append(ious)
        cand_prov += [(si, i) for i in range(len(ious))]
    ious = np.concatenate(cand_ious)
    feats = np.concatenate(cand_feats)
    neg_vecs = np.zeros((0, model.net.config.embed_dim))
    neg_prov, used_band = [], None
    for band in (cfg.neg_band,) + cfg.fallback_bands:
        idx = _band_candidates(ious, band)
        if len(idx):
            e_neg = embed_net.embed(model.net, feats[idx]).e_neg
            chosen = select_hard_negatives(e_neg, cfg.k_negatives, cfg.strategy,
                                           int(derive_rng(*np.atleast_1d(seed), _SELECT, class_id).integers(2 ** 31)))
            neg_vecs = e_neg[chosen]
            neg_prov = [cand_prov[idx[i]] for i in chosen]
            used_band = band
            break
    return ClassSupport(np.concatenate(pos_vecs), neg_vecs, pos_prov, neg_prov, used_band)


def build_support_reps(model: Model, support: dict, cfg: InferenceConfig, seed=0) -> SupportReps:
    """Positive and selected hard-negative embeddings per episode class.

    ``support`` maps class id to its list of support scenes.
    """
    classes = list(support)
    return SupportReps(classes, {c: build_class_support(model, c, support[c], cfg, seed) for c in classes})


@dataclass
class DetectionArrays:
    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    def to_list(self) -> list:
        return [Detection(Box.from_seq(b), int(c), float(s)) for b, c, s in zip(self.boxes, self.classes, self.scores)]

    def __len__(self) -> int:
        return len(self.scores)


def postprocess(boxes: np.ndarray, scores: np.ndarray, class_ids, cfg: InferenceConfig) -> DetectionArrays:
    """Threshold an ``(n_proposals, n_classes)`` score matrix and apply soft-NMS."""
    class_ids = np.asarray(class_ids, dtype=np.int64)
    rows, cols = np.nonzero(scores >= cfg.score_thresh)
    det_boxes = boxes[rows]
    det_cls = class_ids[cols]
    det_scores = scores[rows, cols]
    if len(det_scores) == 0:
        return DetectionArrays(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0))
    idx, rescored = soft_nms_arrays(det_boxes, det_scores, det_cls, cfg.softnms_iou, cfg.softnms_floor)
    return DetectionArrays(det_boxes[idx], det_cls[idx], rescored)


def score_embeddings(emb, bank: RepBank, cfg: InferenceConfig) -> np.ndarray:
    return class_probability(min_distances(bank, emb), cfg.prob)


def _prefilter(scene, cfg: InferenceConfig) -> np.ndarray:
    if cfg.nms_iou is None:
        return np.arange(len(scene.boxes))
    # proposals carry no objectness score; keep the earliest of each duplicate group
    n = len(scene.boxes)
    return np.sort(nms_arrays(scene.boxes, np.ones(n), np.zeros(n, dtype=np.int64), cfg.nms_iou))


def detect(model: Model, support: SupportReps, scene, cfg: InferenceConfig, bank: RepBank | None = None) -> list:
    return detect_arrays(model, support, scene, cfg, bank).to_list()


def detect_arrays(model: Model, support: SupportReps, scene, cfg: InferenceConfig,
                  bank: RepBank | None = None, emb=None) -> DetectionArrays:
    bank = bank if bank is not None else support.bank(model.net.config.embed_dim)
    keep = _prefilter(scene, cfg)
    if emb is None:
        emb = embed_net.embed(model.net, scene.features[keep])
    scores = score_embeddings(emb, bank, cfg)
    return postprocess(scene.boxes[keep], scores, support.classes, cfg)


def pos_only_detect(model: Model, support: SupportReps, scene, cfg: InferenceConfig, bank: RepBank | None = None) -> list:
    return detect(model, support, scene, cfg.with_(positive_only=True), bank)
