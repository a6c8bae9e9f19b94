"""Central finite-difference check of the analytic model gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed_net import EmbedConfig
from .geometry import NEGATIVE, POSITIVE
from .losses import LossConfig
from .model import Model, loss_and_grads
from .representatives import ProbConfig

STEP = 1e-5
TOLERANCE = 1e-4
# denominators below this are treated as absolute error
DENOM_FLOOR = 1e-8


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), DENOM_FLOOR)


@dataclass
class GradCheckResult:
    probes: list

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)

    @property
    def worst(self) -> Probe:
        return max(self.probes, key=lambda p: p.rel_error)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def random_problem(embed_cfg: EmbedConfig, n_classes: int, n_reps: int, batch: int, seed: int):
    """A random model and labeled batch with both label kinds present.

    Biases are drawn away from zero: with zero biases an input that
    silences every trunk unit lands exactly on the zero-norm rule's
    discontinuity, where finite differences say nothing about the gradient.
    """
    rng = np.random.default_rng(seed)
    model = Model.init(embed_cfg, n_classes, n_reps, seed)
    for name, arr in model.net.arrays.items():
        if name.endswith(".b"):
            arr += 0.1 * rng.standard_normal(arr.shape)
    features = rng.standard_normal((batch, embed_cfg.input_dim))
    kinds = np.where(np.arange(batch) % 2 == 0, POSITIVE, NEGATIVE)
    classes = rng.integers(0, n_classes, size=batch)
    return model, features, kinds, classes


def check_gradients(
    model: Model,
    features: np.ndarray,
    kinds: np.ndarray,
    classes: np.ndarray,
    prob_cfg: ProbConfig,
    loss_cfg: LossConfig,
    probes: int = 100,
    seed: int = 0,
    step: float = STEP,
) -> GradCheckResult:
    """Compare analytic and central-difference gradients on random coordinates.

    Coordinates are drawn uniformly over the union of network parameters and
    representatives, with at least one probe per parameter array when
    ``probes`` allows.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    _, grads = loss_and_grads(model, features, kinds, classes, prob_cfg, loss_cfg)
    params = model.params()
    names = sorted(params)
    rng = np.random.default_rng(seed)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    picks = list(range(len(names)))[:probes]
    picks += list(rng.choice(len(names), size=probes - len(picks), p=sizes / sizes.sum()))
    results = []
    for k in picks:
        name = names[k]
        arr = params[name]
        idx = tuple(int(i) for i in np.unravel_index(rng.integers(arr.size), arr.shape))
        orig = arr[idx]
        arr[idx] = orig + step
        model.net.version += 1
        up = loss_and_grads(model, features, kinds, classes, prob_cfg, loss_cfg)[0].total
        arr[idx] = orig - step
        model.net.version += 1
        down = loss_and_grads(model, features, kinds, classes, prob_cfg, loss_cfg)[0].total
        arr[idx] = orig
        model.net.version += 1
        results.append(Probe(name, idx, float(grads[name][idx]), (up - down) / (2.0 * step)))
    return GradCheckResult(results)


def run_default(probes: int = 100, seed: int = 0, embed_cfg: EmbedConfig | None = None,
                prob_cfg: ProbConfig | None = None, loss_cfg: LossConfig | None = None,
                n_classes: int = 6, n_reps: int = 3, batch: int = 16) -> GradCheckResult:
    embed_cfg = embed_cfg or EmbedConfig()
    model, x, kinds, classes = random_problem(embed_cfg, n_classes, n_reps, batch, seed)
    return check_gradients(model, x, kinds, classes, prob_cfg or ProbConfig(), loss_cfg or LossConfig(),
                           probes=probes, seed=seed)
