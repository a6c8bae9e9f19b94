"""Seeded synthetic detection world standing in for a backbone + RPN.

Each class owns a unit prototype direction in feature space and a unit
"part" direction. A proposal's feature blends the prototype of the
ground truth it overlaps most with random clutter, weighted by that IoU.
Some low-IoU proposals near an object are *partial objects*: half
prototype, half class-specific part appearance, independent of IoU.
These are the hard negatives the negative representatives are meant to
capture.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .embed_net import l2_normalize
from .errors import ConfigError
from .geometry import Box, best_gt, iou_matrix
from .serialization import decode_array, encode_array

DATASET_FORMAT = "nprepmet-dataset"
DATASET_VERSION = 1

# per-ground-truth IoU bands that every scene populates
STRATIFY_BANDS = ((0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.7), (0.7, 1.0))
PARTIAL_MAX_IOU = 0.4

# stream tags mixed into seeds so independent draws never share a stream
_BASE_PROTO, _NOVEL_PROTO, _PARTS, _CLUTTER, _TRAIN, _EPISODE = 11, 12, 13, 14, 21, 31


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


@dataclass(frozen=True)
class WorldConfig:
    n_base_classes: int = 40
    n_novel_classes: int = 10
    feature_dim: int = 64
    canvas: float = 100.0
    gt_size: tuple = (15.0, 40.0)
    objects_per_scene: tuple = (1, 3)
    proposals_per_scene: int = 64
    per_band: int = 2
    noise_scale: float = 0.3
    appearance_noise: float = 0.8
    blend_exponent: float = 1.0
    partial_object_ratio: float = 0.9
    part_coherence: float = 1.0
    clutter_rank: int = 16
    # dimension of the subspace holding class prototypes and parts; 0 = whole space
    class_rank: int = 16
    # rank of a dedicated subspace for part directions; 0 = parts share the class subspace
    part_rank: int = 8
    train_scenes_per_class: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gt_size", tuple(float(v) for v in self.gt_size))
        object.__setattr__(self, "objects_per_scene", tuple(int(v) for v in self.objects_per_scene))
        if self.n_base_classes < 2 or self.n_novel_classes < 1:
            raise ConfigError("need >= 2 base classes and >= 1 novel class")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        lo, hi = self.gt_size
        if not 0 < lo <= hi < self.canvas:
            raise ConfigError("gt_size must satisfy 0 < min <= max < canvas")
        olo, ohi = self.objects_per_scene
        if not 1 <= olo <= ohi:
            raise ConfigError("objects_per_scene must satisfy 1 <= min <= max")
        if not 0.0 < self.partial_object_ratio < 1.0:
            raise ConfigError("partial_object_ratio must lie in (0, 1)")
        if not 0.0 <= self.part_coherence <= 1.0:
            raise ConfigError("part_coherence must lie in [0, 1]")
        if not 1 <= self.clutter_rank <= self.feature_dim:
            raise ConfigError("clutter_rank must lie in [1, feature_dim]")
        if self.class_rank < 0 or self.part_rank < 0:
            raise ConfigError("class_rank and part_rank must be >= 0")
        if self.part_rank and not self.class_rank:
            raise ConfigError("part_rank requires class_rank > 0")
        if self.class_rank + self.part_rank + self.clutter_rank > self.feature_dim:
            raise ConfigError("class_rank + part_rank + clutter_rank must not exceed feature_dim")
        if self.appearance_noise < 0:
            raise ConfigError("appearance_noise must be >= 0")
        if self.noise_scale < 0 or self.blend_exponent <= 0 or self.per_band < 1:
            raise ConfigError("noise_scale >= 0, blend_exponent > 0 and per_band >= 1 required")
        needed = ohi * (len(STRATIFY_BANDS) * self.per_band)
        if self.proposals_per_scene < needed:
            raise ConfigError(f"proposals_per_scene must be >= {needed} to stratify every band")

    @property
    def n_classes(self) -> int:
        return self.n_base_classes + self.n_novel_classes

    @property
    def base_classes(self) -> list:
        return list(range(self.n_base_classes))

    @property
    def novel_classes(self) -> list:
        return list(range(self.n_base_classes, self.n_classes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gt_size"] = list(self.gt_size)
        d["objects_per_scene"] = list(self.objects_per_scene)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prototypes:
    """Unit prototype and part directions, indexed by class id."""

    proto: np.ndarray
    part: np.ndarray
    # orthonormal basis (D, r) of the background clutter subspace shared by all scenes
    clutter_basis: np.ndarray

    def dot_products(self) -> np.ndarray:
        return self.proto @ self.proto.T


@dataclass
class SyntheticScene:
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    boxes: np.ndarray
    features: np.ndarray
    # features of the annotated boxes themselves (support crops)
    gt_features: np.ndarray = field(default=None)
    partial: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.gt_boxes) == 0:
            raise ConfigError("a scene needs at least one ground truth")
        if self.gt_features is None:
            self.gt_features = np.zeros((len(self.gt_boxes), self.features.shape[1]))
        if self.partial is None:
            self.partial = np.zeros(len(self.boxes), dtype=bool)

    @property
    def ground_truths(self) -> list:
        return [(Box.from_seq(b), int(c)) for b, c in zip(self.gt_boxes, self.gt_classes)]

    def to_dict(self) -> dict:
        return {
            "gt_boxes": self.gt_boxes.tolist(),
            "gt_classes": self.gt_classes.tolist(),
            "boxes": self.boxes.tolist(),
            "features": encode_array(self.features),
            "gt_features": encode_array(self.gt_features),
            "partial": self.partial.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(
            gt_boxes=np.array(d["gt_boxes"], dtype=np.float64).reshape(-1, 4),
            gt_classes=np.array(d["gt_classes"], dtype=np.int64),
            boxes=np.array(d["boxes"], dtype=np.float64).reshape(-1, 4),
            features=decode_array(d["features"]),
            gt_features=decode_array(d["gt_features"]),
            partial=np.array(d["partial"], dtype=bool),
        )


@dataclass
class Episode:
    classes: list
    shot: int
    support: dict
    query: list
    seed: int

    @property
    def way(self) -> int:
        return len(self.classes)


def gen_prototypes(config: WorldConfig, seed: int | None = None) -> Prototypes:
    seed = config.seed if seed is None else seed
    d = config.feature_dim
    r = config.class_rank or d
    base = derive_rng(seed, _BASE_PROTO).standard_normal((config.n_base_classes, r))
    novel = derive_rng(seed, _NOVEL_PROTO).standard_normal((config.n_novel_classes, r))
    pr = config.part_rank or r
    parts = derive_rng(seed, _PARTS).standard_normal((config.n_classes, pr))
    if config.class_rank:
        # class, part and clutter subspaces are mutually orthogonal
        cr, width = config.class_rank, config.class_rank + config.part_rank + config.clutter_rank
        q, _ = np.linalg.qr(derive_rng(seed, _CLUTTER).standard_normal((d, width)))
        span, basis = q[:, :cr], q[:, cr + config.part_rank:]
        part_span = q[:, cr:cr + config.part_rank] if config.part_rank else span
        base, novel, parts = base @ span.T, novel @ span.T, parts @ part_span.T
    else:
        basis, _ = np.linalg.qr(derive_rng(seed, _CLUTTER).standard_normal((d, config.clutter_rank)))
    proto = l2_normalize(np.concatenate([base, novel]))[0]
    return Prototypes(proto=proto, part=l2_normalize(parts)[0], clutter_basis=basis)


def _place_gts(config: WorldConfig, classes, rng):
    boxes = []
    lo, hi = config.gt_size
    for _ in classes:
        for attempt in range(100):
            w, h = rng.uniform(lo, hi, size=2)
            x, y = rng.uniform(0.0, config.canvas - w), rng.uniform(0.0, config.canvas - h)
            cand = np.array([x, y, x + w, y + h])
            if not boxes or iou_matrix(cand, np.array(boxes)).max() == 0.0 or attempt == 99:
                boxes.append(cand)
                break
    return np.array(boxes)


def _jitter_in_band(gt: np.ndarray, band: tuple, rng, canvas: float, chunk: int = 64) -> np.ndarray:
    lo, hi = band
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    cx, cy = (gt[0] + gt[2]) / 2, (gt[1] + gt[3]) / 2
    # jitter magnitude grows with the band's distance from IoU 1
    spread = 1.6 * (1.0 - 0.5 * (lo + hi)) + 0.05
    for _ in range(200):
        t = rng.uniform(0.0, spread, size=(chunk, 1))
        shift = rng.uniform(-1, 1, size=(chunk, 2)) * t
        scale = np.exp(rng.uniform(-1, 1, size=(chunk, 2)) * t)
        nw, nh = w * scale[:, 0], h * scale[:, 1]
        ncx, ncy = cx + shift[:, 0] * w, cy + shift[:, 1] * h
        boxes = np.stack([ncx - nw / 2, ncy - nh / 2, ncx + nw / 2, ncy + nh / 2], axis=1)
        boxes = np.clip(boxes, 0.0, canvas)
        v = iou_matrix(boxes, gt)[:, 0]
        ok = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0) & (v > lo)
        ok &= (v <= hi) if hi >= 1.0 else (v < hi)
        hit = np.flatnonzero(ok)
        if len(hit):
            return boxes[hit[0]]
    raise RuntimeError(f"could not sample a proposal in IoU band {band}")


def _background_box(rng, canvas: float) -> np.ndarray:
    w, h = rng.uniform(10.0, 50.0, size=2)
    x, y = rng.uniform(0.0, canvas - w), rng.uniform(0.0, canvas - h)
    return np.array([x, y, x + w, y + h])


def instance_appearance(config, prototypes, gt_classes, rng) -> np.ndarray:
    """Per-object appearance: the class prototype tilted by a random unit direction."""
    tilt = l2_normalize(rng.standard_normal((len(gt_classes), config.feature_dim)))[0]
    return l2_normalize(prototypes.proto[gt_classes] + config.appearance_noise * tilt)[0]


def proposal_features(config, prototypes, boxes, gt_boxes, gt_classes, appearance, partial_src, rng) -> np.ndarray:
    """IoU-blended features; ``partial_src[i] >= 0`` marks a partial object of that class."""
    d = config.feature_dim
    n = len(boxes)
    ious = iou_matrix(boxes, gt_boxes)
    best = np.array([best_gt(row, gt_classes) for row in ious], dtype=np.int64)
    w = np.clip(ious[np.arange(n), best], 0.0, 1.0) ** config.blend_exponent
    clutter = l2_normalize(rng.standard_normal((n, prototypes.clutter_basis.shape[1])) @ prototypes.clutter_basis.T)[0]
    clean = w[:, None] * appearance[best] + (1.0 - w[:, None]) * clutter
    partial = partial_src >= 0
    if partial.any():
        c = partial_src[partial]
        coh = config.part_coherence
        part = l2_normalize(coh * prototypes.part[c] + (1.0 - coh) * clutter[partial])[0]
        clean[partial] = 0.5 * prototypes.proto[c] + 0.5 * part
    clean = l2_normalize(clean)[0]
    noise = rng.standard_normal((n, d)) * (config.noise_scale / np.sqrt(d))
    return l2_normalize(clean + noise)[0]


def gen_scene(config: WorldConfig, prototypes: Prototypes, class_pool, seed, n_objects=None, first_class=None) -> SyntheticScene:
    """One scene with 1..3 objects from ``class_pool`` and stratified proposals."""
    pool = list(class_pool)
    if not pool:
        raise ConfigError("class_pool must be non-empty")
    rng = derive_rng(*np.atleast_1d(seed))
    if n_objects is None:
        n_objects = int(rng.integers(config.objects_per_scene[0], config.objects_per_scene[1] + 1))
    classes = [int(c) for c in rng.choice(pool, size=n_objects)]
    if first_class is not None:
        classes[0] = int(first_class)
    gt_boxes = _place_gts(config, classes, rng)
    gt_classes = np.array(classes, dtype=np.int64)

    boxes, partial_src = [], []
    for g, c in zip(gt_boxes, gt_classes):
        for band in STRATIFY_BANDS:
            for _ in range(config.per_band):
                box = _jitter_in_band(g, band, rng, config.canvas)
                boxes.append(box)
                near_miss = band[1] <= PARTIAL_MAX_IOU
                is_partial = near_miss and rng.uniform() < config.partial_object_ratio
                partial_src.append(int(c) if is_partial else -1)
    while len(boxes) < config.proposals_per_scene:
        boxes.append(_background_box(rng, config.canvas))
        partial_src.append(-1)
    boxes = np.array(boxes)
    partial_src = np.array(partial_src)
    appearance = instance_appearance(config, prototypes, gt_classes, rng)
    feats = proposal_features(config, prototypes, boxes, gt_boxes, gt_classes, appearance, partial_src, rng)
    gt_feats = proposal_features(config, prototypes, gt_boxes, gt_boxes, gt_classes, appearance,
                                 np.full(len(gt_boxes), -1), rng)
    return SyntheticScene(gt_boxes, gt_classes, boxes, feats, gt_feats, partial_src >= 0)


def gen_train_scenes(config: WorldConfig, prototypes: Prototypes) -> list:
    """Base-class training scenes; scene ``i`` always contains base class ``i % n_base``."""
    n = config.train_scenes_per_class * config.n_base_classes
    return [
        gen_scene(config, prototypes, config.base_classes, (config.seed, _TRAIN, i),
                  first_class=i % config.n_base_classes)
        for i in range(n)
    ]


def gen_episode(config: WorldConfig, prototypes: Prototypes, novel_classes, way: int, shot: int, seed: int,
                queries_per_class: int = 2) -> Episode:
    novel_classes = list(novel_classes)
    if way > len(novel_classes):
        raise ConfigError(f"way {way} exceeds the {len(novel_classes)} available classes")
    if way < 1 or shot < 1:
        raise ConfigError("way and shot must be >= 1")
    rng = derive_rng(seed, _EPISODE)
    classes = [int(c) for c in rng.choice(novel_classes, size=way, replace=False)]
    support = {
        c: [gen_scene(config, prototypes, [c], (seed, _EPISODE, 1, ci, s), n_objects=1) for s in range(shot)]
        for ci, c in enumerate(classes)
    }
    query = [
        gen_scene(config, prototypes, classes, (seed, _EPISODE, 2, q), first_class=classes[q % way])
        for q in range(queries_per_class * way)
    ]
    return Episode(classes=classes, shot=shot, support=support, query=query, seed=seed)


@dataclass
class Dataset:
    config: WorldConfig
    prototypes: Prototypes
    train_scenes: list
    # provenance echoed into the file (seed, resolved run config)
    run_info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run": self.run_info,
            "format": DATASET_FORMAT,
            "format_version": DATASET_VERSION,
            "world_config": self.config.to_dict(),
            "prototype_dot_products": encode_array(self.prototypes.dot_products()),
            "prototypes": encode_array(self.prototypes.proto),
            "part_prototypes": encode_array(self.prototypes.part),
            "clutter_basis": encode_array(self.prototypes.clutter_basis),
            "base_classes": self.config.base_classes,
            "novel_classes": self.config.novel_classes,
            "train_scenes": [s.to_dict() for s in self.train_scenes],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Dataset":
        if doc.get("format") != DATASET_FORMAT or doc.get("format_version") != DATASET_VERSION:
            raise ConfigError("not a supported dataset file (format/version mismatch)")
        return cls(
            config=WorldConfig.from_dict(doc["world_config"]),
            prototypes=Prototypes(decode_array(doc["prototypes"]), decode_array(doc["part_prototypes"]),
                                  decode_array(doc["clutter_basis"])),
            train_scenes=[SyntheticScene.from_dict(s) for s in doc["train_scenes"]],
            run_info=doc.get("run", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_dataset(config: WorldConfig) -> Dataset:
    protos = gen_prototypes(config)
    return Dataset(config, protos, gen_train_scenes(config, protos))
