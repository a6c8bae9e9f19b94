"""SGD training of the embedding network and representatives on base classes."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embed_net import EmbedConfig
from .errors import ConfigError, NumericalError
from .geometry import NEG_BAND, NEGATIVE, POS_THRESH, POSITIVE, label_proposals_arrays
from .losses import LossConfig
from .model import Model, load_checkpoint, loss_and_grads, save_checkpoint
from .representatives import ProbConfig
from .serialization import decode_array, encode_array
from .synth_world import derive_rng

log = logging.getLogger(__name__)

_SHUFFLE, _SAMPLE = 41, 42


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    base_lr: float = 0.01
    lr_decay_epochs: tuple = (4, 6, 15)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_scenes: int = 4
    n_reps: int = 5
    max_pos_per_scene: int = 16
    max_neg_per_scene: int = 16
    pos_thresh: float = POS_THRESH
    neg_band: tuple = NEG_BAND
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        object.__setattr__(self, "neg_band", tuple(float(v) for v in self.neg_band))
        if self.epochs < 1 or self.batch_scenes < 1 or self.n_reps < 1:
            raise ConfigError("epochs, batch_scenes and n_reps must be >= 1")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(not 1 <= e <= self.epochs for e in d):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing within [1, {self.epochs}]")
        if self.base_lr <= 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("base_lr > 0 and lr_decay_factor in (0, 1] required")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum in [0, 1) and weight_decay >= 0 required")
        if self.max_pos_per_scene < 0 or self.max_neg_per_scene < 0:
            raise ConfigError("proposal caps must be >= 0")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-indexed ``epoch``; each decay applies once its epoch has completed."""
    passed = sum(1 for d in cfg.lr_decay_epochs if d < epoch)
    return cfg.base_lr * cfg.lr_decay_factor ** passed


@dataclass
class Batch:
    features: np.ndarray
    kinds: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return len(self.kinds)


def assemble_batch(scenes, cfg: TrainConfig, seed) -> Batch:
    """Label every proposal and keep at most the capped number per kind and scene."""
    rng = derive_rng(*np.atleast_1d(seed), _SAMPLE)
    feats, kinds, classes = [], [], []
    for scene in scenes:
        k, c, _ = label_proposals_arrays(scene.boxes, scene.gt_boxes, scene.gt_classes, cfg.pos_thresh, cfg.neg_band)
        for code, cap in ((POSITIVE, cfg.max_pos_per_scene), (NEGATIVE, cfg.max_neg_per_scene)):
            idx = np.flatnonzero(k == code)
            if len(idx) > cap:
                idx = np.sort(rng.choice(idx, size=cap, replace=False))
            feats.append(scene.features[idx])
            kinds.append(k[idx])
            classes.append(c[idx])
    d = scenes[0].features.shape[1] if scenes else 0
    return Batch(
        np.concatenate(feats) if feats else np.zeros((0, d)),
        np.concatenate(kinds) if kinds else np.zeros(0, dtype=np.int64),
        np.concatenate(classes) if classes else np.zeros(0, dtype=np.int64),
    )


@dataclass
class TrainState:
    model: Model
    velocity: dict
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: Model) -> "TrainState":
        return cls(model, {k: np.zeros_like(v) for k, v in model.params().items()})


def _decayed(name: str) -> bool:
    return not name.endswith(".b")


def sgd_step(state: TrainState, grads: dict, lr: float, momentum: float, weight_decay: float) -> None:
    """Momentum SGD with weight decay, then re-projection of representatives to unit norm."""
    params = state.model.params()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name} at step {state.step}")
    for name, p in params.items():
        g = grads[name]
        if weight_decay and _decayed(name):
            g = g + weight_decay * p
        v = state.velocity[name]
        v *= momentum
        v += g
        p -= lr * v
    state.model.bank.renormalize()
    state.model.net.version += 1
    state.step += 1


def check_no_leakage(classes: np.ndarray, n_base: int) -> None:
    bad = classes[(classes >= n_base) | (classes < -1)]
    if len(bad):
        raise ConfigError(f"training batch touches non-base class ids {sorted(set(bad.tolist()))}")


def train(
    scenes,
    n_base_classes: int,
    embed_cfg: EmbedConfig,
    prob_cfg: ProbConfig,
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    out_dir=None,
    state: TrainState | None = None,
    run_info: dict | None = None,
    until_epoch: int | None = None,
) -> TrainState:
    """Train for ``cfg.epochs`` epochs (continuing from ``state`` if given).

    ``until_epoch`` stops early after that epoch, leaving the schedule intact.

    When ``out_dir`` is set, writes ``epoch_XXX.json`` checkpoints,
    ``final.json`` and ``loss_curve.csv``.
    """
    for s in scenes:
        check_no_leakage(s.gt_classes, n_base_classes)
    if state is None:
        state = TrainState.fresh(Model.init(embed_cfg, n_base_classes, cfg.n_reps, cfg.seed))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    n = len(scenes)
    last = cfg.epochs if until_epoch is None else min(cfg.epochs, until_epoch)
    while state.epoch < last:
        epoch = state.epoch + 1
        lr = lr_at_epoch(cfg, epoch)
        order = derive_rng(cfg.seed, _SHUFFLE, epoch).permutation(n)
        for start in range(0, n, cfg.batch_scenes):
            chunk = [scenes[i] for i in order[start:start + cfg.batch_scenes]]
            batch = assemble_batch(chunk, cfg, (cfg.seed, epoch, start))
            check_no_leakage(batch.classes, n_base_classes)
            if not np.any((batch.kinds == POSITIVE) | (batch.kinds == NEGATIVE)):
                log.warning("epoch %d: batch at %d has no labeled proposals, skipped", epoch, start)
                continue
            breakdown, grads = loss_and_grads(state.model, batch.features, batch.kinds, batch.classes,
                                              prob_cfg, loss_cfg)
            if not np.isfinite(breakdown.total):
                raise NumericalError(f"non-finite loss at step {state.step}")
            sgd_step(state, grads, lr, cfg.momentum, cfg.weight_decay)
            state.history.append({
                "step": state.step, "epoch": epoch, "lr": lr,
                "ce": breakdown.cross_entropy, "triplet": breakdown.triplet, "total": breakdown.total,
            })
        state.epoch = epoch
        ep_losses = [h["total"] for h in state.history if h["epoch"] == epoch]
        log.info("epoch %d lr %.0e mean loss %.4f", epoch, lr, np.mean(ep_losses) if ep_losses else float("nan"))
        if out_dir is not None:
            save_state(out_dir / f"epoch_{epoch:03d}.json", state, run_info)
    if out_dir is not None and state.epoch == cfg.epochs:
        save_state(out_dir / "final.json", state, run_info)
        write_loss_curve(out_dir / "loss_curve.csv", state.history)
    return state


def epoch_means(history: list) -> dict:
    out = {}
    for h in history:
        out.setdefault(h["epoch"], []).append(h["total"])
    return {e: float(np.mean(v)) for e, v in out.items()}


def write_loss_curve(path, history: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "epoch", "lr", "ce", "triplet", "total"])
        w.writeheader()
        for h in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in h.items()})


def save_state(path, state: TrainState, run_info: dict | None = None) -> None:
    extra = {
        "epoch": state.epoch,
        "step": state.step,
        "velocity": {k: encode_array(v) for k, v in state.velocity.items()},
        "history": state.history,
        "run": run_info or {},
    }
    save_checkpoint(path, state.model, extra)


def load_state(path):
    """Returns ``(TrainState, run_info)``."""
    model, extra = load_checkpoint(path)
    state = TrainState.fresh(model)
    for k, v in extra.get("velocity", {}).items():
        state.velocity[k] = decode_array(v)
    state.epoch = int(extra.get("epoch", 0))
    state.step = int(extra.get("step", 0))
    state.history = list(extra.get("history", []))
    return state, extra.get("run", {})


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lr_decay_epochs"] = list(cfg.lr_decay_epochs)
    d["neg_band"] = list(cfg.neg_band)
    return d
