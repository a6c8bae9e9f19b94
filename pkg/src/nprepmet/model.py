"""The trainable model (embedding network + representative banks) and its
checkpoint container."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import embed_net
from .embed_net import EmbedConfig, NetParams
from .errors import ConfigError
from .losses import LossConfig, batch_loss
from .representatives import ProbConfig, RepBank
from .serialization import decode_array, encode_array

CHECKPOINT_FORMAT = "nprepmet-checkpoint"
CHECKPOINT_VERSION = 1
REP_KEYS = ("reps.pos", "reps.neg")


@dataclass
class Model:
    net: NetParams
    bank: RepBank

    @classmethod
    def init(cls, config: EmbedConfig, n_classes: int, n_reps: int, seed: int) -> "Model":
        net = embed_net.init_params(config, seed)
        bank = RepBank.random(n_classes, n_reps, config.embed_dim, seed + 1)
        return cls(net, bank)

    def params(self) -> dict:
        """Every trainable array by name (views, not copies)."""
        out = dict(self.net.arrays)
        out["reps.pos"] = self.bank.pos
        out["reps.neg"] = self.bank.neg
        return out

    def copy(self) -> "Model":
        return Model(self.net.copy(), self.bank.copy())


def loss_and_grads(
    model: Model,
    features: np.ndarray,
    kinds: np.ndarray,
    classes: np.ndarray,
    prob_cfg: ProbConfig,
    loss_cfg: LossConfig,
):
    """Forward, loss and full backward pass for one labeled batch.

    Returns ``(LossBreakdown, grads)`` with ``grads`` keyed like
    :meth:`Model.params`.
    """
    emb, cache = embed_net.forward(model.net, features)
    breakdown, g = batch_loss(emb.e_neg, emb.e_pos, kinds, classes, model.bank, prob_cfg, loss_cfg)
    grads, _ = embed_net.backward(model.net, cache, g.e_neg, g.e_pos)
    grads["reps.pos"] = g.reps_pos
    grads["reps.neg"] = g.reps_neg
    return breakdown, grads


def model_to_dict(model: Model, extra: dict | None = None) -> dict:
    cfg = asdict(model.net.config)
    cfg["trunk_dims"] = list(cfg["trunk_dims"])
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "embed_config": cfg,
        "n_classes": model.bank.n_classes,
        "n_reps": model.bank.n_reps,
        "arrays": {k: encode_array(v) for k, v in model.params().items()},
        "replaced": {
            str(c): {"pos": encode_array(p), "neg": encode_array(n)}
            for c, (p, n) in sorted(model.bank.replaced.items())
        },
        "extra": extra or {},
    }


def model_from_dict(doc: dict) -> Model:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError("not a supported checkpoint (format/version mismatch)")
    config = EmbedConfig(**doc["embed_config"])
    arrays = {k: decode_array(v) for k, v in doc["arrays"].items()}
    bank = RepBank(arrays.pop("reps.pos"), arrays.pop("reps.neg"))
    for c, v in doc.get("replaced", {}).items():
        bank.replaced[int(c)] = (decode_array(v["pos"]), decode_array(v["neg"]))
    expected = embed_net.init_params(config, 0).arrays
    if set(expected) != set(arrays) or any(expected[k].shape != arrays[k].shape for k in expected):
        raise ConfigError("checkpoint arrays do not match the echoed embed config")
    return Model(NetParams(config, arrays), bank)


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, extra), sort_keys=True, indent=1))


def load_checkpoint(path):
    """Returns ``(model, extra)``."""
    doc = json.loads(Path(path).read_text())
    return model_from_dict(doc), doc.get("extra", {})
