"""Average precision, episodic evaluation and ablation grids."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import embed_net
from .errors import ConfigError
from .geometry import iou_matrix
from .inference import DetectionArrays, InferenceConfig, build_support_reps, detect_arrays, postprocess
from .synth_world import gen_episode

AP_IOU = 0.5


def _canonical_order(scores, images, boxes) -> np.ndarray:
    # score descending; ties broken by content so input order never matters
    keys = [boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], images, -scores]
    return np.lexsort(keys)


def average_precision_arrays(det_boxes, det_scores, det_images, gt_boxes, gt_images, iou_thresh: float = AP_IOU) -> float:
    """All-point interpolated AP for one class over a set of images.

    Returns NaN when there are neither ground truths nor detections.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64)
    det_images = np.asarray(det_images, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_images = np.asarray(gt_images, dtype=np.int64)
    n_gt = len(gt_boxes)
    if n_gt == 0:
        return math.nan if len(det_scores) == 0 else 0.0
    if len(det_scores) == 0:
        return 0.0
    order = _canonical_order(det_scores, det_images, det_boxes)
    ious = iou_matrix(det_boxes, gt_boxes)
    ious[det_images[:, None] != gt_images[None, :]] = 0.0
    matched = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        cand = np.where(matched, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] > iou_thresh:
            matched[j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    return envelope_ap(recall, precision)


def envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets, gts, iou_thresh: float = AP_IOU) -> float:
    """AP of one class's detections (``Detection`` list) against ground-truth ``Box`` es of one image."""
    boxes = np.array([d.box.as_tuple() for d in dets]).reshape(-1, 4)
    scores = np.array([d.score for d in dets])
    gt = np.array([g.as_tuple() for g in gts]).reshape(-1, 4)
    return average_precision_arrays(boxes, scores, np.zeros(len(dets)), gt, np.zeros(len(gts)), iou_thresh)


@dataclass
class EpisodeResult:
    seed: int
    classes: list
    ap: dict
    mean_ap: float
    # per-query DetectionArrays, kept only on request
    detections: list | None = None


@dataclass
class EvalReport:
    episodes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def maps(self) -> np.ndarray:
        return np.array([e.mean_ap for e in self.episodes])

    @property
    def mean(self) -> float:
        m = self.maps[~np.isnan(self.maps)] if len(self.episodes) else np.zeros(0)
        return float(m.mean()) if len(m) else math.nan

    @property
    def std(self) -> float:
        m = self.maps[~np.isnan(self.maps)] if len(self.episodes) else np.zeros(0)
        return float(m.std()) if len(m) else math.nan

    @property
    def empty(self) -> bool:
        return not self.episodes

    def rows(self) -> list:
        out = []
        for e in self.episodes:
            for c in e.classes:
                out.append({"episode_seed": e.seed, "class_id": c, "AP": e.ap[c], "episode_mAP": e.mean_ap})
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "mean_mAP": self.mean,
            "std_mAP": self.std,
            "n_episodes": len(self.episodes),
            "episodes": [
                {"seed": e.seed, "classes": e.classes, "AP": {str(c): e.ap[c] for c in e.classes}, "mAP": e.mean_ap}
                for e in self.episodes
            ],
        }


def episode_ap(query_scenes, detections: list, classes) -> tuple:
    """Per-class AP over a query set; classes without ground truth are NaN and excluded from the mean."""
    ap = {}
    for c in classes:
        db, ds, di, gb, gi = [], [], [], [], []
        for k, (scene, dets) in enumerate(zip(query_scenes, detections)):
            sel = dets.classes == c
            db.append(dets.boxes[sel])
            ds.append(dets.scores[sel])
            di.append(np.full(sel.sum(), k))
            g = scene.gt_classes == c
            gb.append(scene.gt_boxes[g])
            gi.append(np.full(g.sum(), k))
        ap[c] = average_precision_arrays(np.concatenate(db), np.concatenate(ds), np.concatenate(di),
                                         np.concatenate(gb), np.concatenate(gi))
    vals = [v for v in ap.values() if not math.isnan(v)]
    return ap, (float(np.mean(vals)) if vals else math.nan)


@dataclass(frozen=True)
class Protocol:
    way: int = 5
    shot: int = 1
    n_episodes: int = 200
    seed: int = 0
    queries_per_class: int = 2

    def episode_seed(self, i: int) -> int:
        return self.seed * 1_000_003 + i


def make_episodes(dataset, protocol: Protocol) -> list:
    cfg = dataset.config
    return [
        gen_episode(cfg, dataset.prototypes, cfg.novel_classes, protocol.way, protocol.shot,
                    protocol.episode_seed(i), protocol.queries_per_class)
        for i in range(protocol.n_episodes)
    ]


def evaluate_variants(model, episodes: list, variants: dict, keep_detections: bool = False) -> dict:
    """Evaluate several inference configs on the same episodes.

    Query embeddings are computed once per episode and shared by every
    variant, so cells of an ablation are paired by construction.
    """
    reports = {name: EvalReport(config={"variant": name}) for name in variants}
    for ep in episodes:
        q_embs = [embed_net.embed(model.net, s.features) for s in ep.query]
        for name, cfg in variants.items():
            if cfg.nms_iou is not None:
                dets = [detect_arrays(model, support_reps(model, ep, cfg), s, cfg) for s in ep.query]
            else:
                support = support_reps(model, ep, cfg)
                bank = support.bank(model.net.config.embed_dim)
                dets = [detect_arrays(model, support, s, cfg, bank=bank, emb=e) for s, e in zip(ep.query, q_embs)]
            ap, m = episode_ap(ep.query, dets, ep.classes)
            reports[name].episodes.append(
                EpisodeResult(ep.seed, list(ep.classes), ap, m, dets if keep_detections else None))
    return reports


def support_reps(model, episode, cfg: InferenceConfig):
    return build_support_reps(model, episode.support, cfg, seed=episode.seed)


def run_episodes(model, dataset, protocol: Protocol, cfg: InferenceConfig, episodes: list | None = None,
                 keep_detections: bool = False) -> EvalReport:
    """Episodic evaluation; ``n_episodes == 0`` yields an empty report with NaN aggregates."""
    if protocol.n_episodes == 0:
        return EvalReport(config={"protocol": dict(protocol.__dict__)})
    episodes = episodes if episodes is not None else make_episodes(dataset, protocol)
    report = evaluate_variants(model, episodes, {"eval": cfg}, keep_detections)["eval"]
    report.config = {"protocol": dict(protocol.__dict__)}
    return report


def oracle_scores(prototypes, scene, classes, cfg: InferenceConfig) -> np.ndarray:
    """Score proposals by distance to the true class prototypes (an upper-bound scorer)."""
    protos = prototypes.proto[list(classes)]
    d = np.linalg.norm(scene.features[:, None, :] - protos[None], axis=-1)
    return np.exp(-d / (2.0 * cfg.sigma ** 2))


def run_oracle(dataset, protocol: Protocol, cfg: InferenceConfig, episodes: list | None = None) -> EvalReport:
    episodes = episodes if episodes is not None else make_episodes(dataset, protocol)
    report = EvalReport(config={"protocol": dict(protocol.__dict__), "scorer": "oracle"})
    for ep in episodes:
        dets = [postprocess(s.boxes, oracle_scores(dataset.prototypes, s, ep.classes, cfg), ep.classes, cfg)
                for s in ep.query]
        ap, m = episode_ap(ep.query, dets, ep.classes)
        report.episodes.append(EpisodeResult(ep.seed, list(ep.classes), ap, m))
    return report


ABLATION_AXES = ("strategy", "beta", "neg_band", "inference", "embedding")


def grid_cells(grid: dict) -> list:
    """Cross product of grid axes as a list of ``{axis: value}`` dicts."""
    unknown = set(grid) - set(ABLATION_AXES)
    if unknown:
        raise ConfigError(f"unknown ablation axes {sorted(unknown)}; valid axes: {list(ABLATION_AXES)}")
    for axis, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axis {axis!r} needs a non-empty list of values")
    axes = [a for a in ABLATION_AXES if a in grid]
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def cell_inference_config(base: InferenceConfig, cell: dict) -> InferenceConfig:
    kw = {}
    if "strategy" in cell:
        kw["strategy"] = cell["strategy"]
    if "beta" in cell:
        kw["beta"] = float(cell["beta"])
    if "neg_band" in cell:
        kw["neg_band"] = tuple(cell["neg_band"])
        # keep only fallback bands below the swept band
        kw["fallback_bands"] = tuple(b for b in base.fallback_bands if b[1] <= cell["neg_band"][0])
    if "inference" in cell:
        mode = str(cell["inference"]).lower()
        if mode not in ("pos", "np"):
            raise ConfigError(f"inference must be 'pos' or 'np', got {cell['inference']!r}")
        kw["positive_only"] = mode == "pos"
    return base.with_(**kw)


@dataclass
class AblationRow:
    cell: dict
    report: EvalReport


def run_ablation(grid: dict, base_cfg: InferenceConfig, episodes: list, model_for_embedding) -> list:
    """Evaluate every grid cell on the same episodes.

    ``model_for_embedding(kind)`` returns the trained model for an
    embedding axis value (``"np"`` or ``"single"``); it is only called
    with ``"np"`` when the axis is absent.
    """
    cells = grid_cells(grid)
    rows = []
    by_embedding = {}
    for cell in cells:
        by_embedding.setdefault(str(cell.get("embedding", "np")).lower(), []).append(cell)
    for kind, group in by_embedding.items():
        if kind not in ("np", "single"):
            raise ConfigError(f"embedding must be 'np' or 'single', got {kind!r}")
        model = model_for_embedding(kind)
        variants = {i: cell_inference_config(base_cfg, c) for i, c in enumerate(group)}
        reports = evaluate_variants(model, episodes, variants)
        rows += [AblationRow(c, reports[i]) for i, c in enumerate(group)]
    order = {id(c): k for k, c in enumerate(cells)}
    rows.sort(key=lambda r: order[id(r.cell)])
    return rows
