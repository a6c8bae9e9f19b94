"""Dense embedding network with a shared trunk and two L2-normalized heads.

Parameters live in a flat ``name -> ndarray`` mapping so the optimizer,
checkpointing and gradient checking can treat them uniformly. Layer
names are ``trunk.{l}.W`` / ``trunk.{l}.b`` for the trunk and
``head_neg.*`` / ``head_pos.*`` for the two heads (``head.*`` when the
single-embedding ablation merges them).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class EmbedConfig:
    input_dim: int = 64
    trunk_dims: tuple = (128, 128)
    embed_dim: int = 32
    single_embedding: bool = False

    def __post_init__(self):
        object.__setattr__(self, "trunk_dims", tuple(int(d) for d in self.trunk_dims))
        dims = (self.input_dim, self.embed_dim) + self.trunk_dims
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all layer widths must be >= 1, got {dims}")

    @property
    def head_names(self) -> tuple:
        return ("head",) if self.single_embedding else ("head_neg", "head_pos")


@dataclass
class NetParams:
    config: EmbedConfig
    arrays: dict
    # bumped on every in-place update so stale caches can be detected
    version: int = 0

    def layer_names(self) -> list:
        return [f"trunk.{l}" for l in range(len(self.config.trunk_dims))] + list(self.config.head_names)

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.version)


@dataclass(frozen=True)
class NPEmbedding:
    """Negative and positive embeddings; rows are unit vectors.

    Arrays are ``(e,)`` for a single proposal or ``(B, e)`` for a batch.
    """

    e_neg: np.ndarray
    e_pos: np.ndarray


@dataclass
class ForwardCache:
    params: NetParams
    version: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    heads: dict = field(default_factory=dict)
    squeeze: bool = False


def init_params(config: EmbedConfig, seed: int) -> NetParams:
    """Fan-in uniform init ``U(-sqrt(6/fan_in), +sqrt(6/fan_in))``; zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    fan_in = config.input_dim
    for l, width in enumerate(config.trunk_dims):
        bound = np.sqrt(6.0 / fan_in)
        arrays[f"trunk.{l}.W"] = rng.uniform(-bound, bound, size=(width, fan_in))
        arrays[f"trunk.{l}.b"] = np.zeros(width)
        fan_in = width
    bound = np.sqrt(6.0 / fan_in)
    for name in config.head_names:
        arrays[f"{name}.W"] = rng.uniform(-bound, bound, size=(config.embed_dim, fan_in))
        arrays[f"{name}.b"] = np.zeros(config.embed_dim)
    return NetParams(config, arrays)


def l2_normalize(v: np.ndarray):
    """Row-wise L2 normalization with the zero-vector rule.

    Rows with norm below ``NORM_EPS`` map to the first basis vector.
    Returns ``(u, norms)``.
    """
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    tiny = norms < NORM_EPS
    u = v / np.where(tiny, 1.0, norms)
    if tiny.any():
        basis = np.zeros(v.shape[-1])
        basis[0] = 1.0
        u = np.where(tiny, basis, u)
    return u, norms


def _normalize_backward(u: np.ndarray, norms: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    # d u / d v = (I - u u^T) / ||v||; zero for the degenerate rows
    proj = grad_u - u * np.sum(grad_u * u, axis=-1, keepdims=True)
    tiny = norms < NORM_EPS
    return np.where(tiny, 0.0, proj / np.where(tiny, 1.0, norms))


def forward(params: NetParams, raw_feature: np.ndarray):
    """Embed one feature vector ``(D,)`` or a batch ``(B, D)``.

    Returns ``(NPEmbedding, ForwardCache)``.
    """
    cfg = params.config
    x = np.asarray(raw_feature, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ConfigError(f"expected features of length {cfg.input_dim}, got shape {np.shape(raw_feature)}")
    a = params.arrays
    cache = ForwardCache(params=params, version=params.version, squeeze=squeeze)
    h = x
    for l in range(len(cfg.trunk_dims)):
        cache.inputs.append(h)
        z = h @ a[f"trunk.{l}.W"].T + a[f"trunk.{l}.b"]
        cache.pre.append(z)
        h = np.maximum(z, 0.0)
    cache.inputs.append(h)
    outs = {}
    for name in cfg.head_names:
        v = h @ a[f"{name}.W"].T + a[f"{name}.b"]
        u, norms = l2_normalize(v)
        cache.heads[name] = (u, norms)
        outs[name] = u
    if cfg.single_embedding:
        e_neg = e_pos = outs["head"]
    else:
        e_neg, e_pos = outs["head_neg"], outs["head_pos"]
    if squeeze:
        e_neg, e_pos = e_neg[0], e_pos[0]
    return NPEmbedding(e_neg=e_neg, e_pos=e_pos), cache


def embed(params: NetParams, raw_feature: np.ndarray) -> NPEmbedding:
    return forward(params, raw_feature)[0]


def backward(params: NetParams, cache: ForwardCache, grad_e_neg: np.ndarray, grad_e_pos: np.ndarray):
    """Backpropagate embedding gradients to parameters and input.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` has the same
    keys and shapes as ``params.arrays``.
    """
    if cache.params is not params or cache.version != params.version:
        raise UsageError("forward cache does not belong to these parameters (stale or mismatched)")
    cfg = params.config
    a = params.arrays
    g_neg = np.atleast_2d(np.asarray(grad_e_neg, dtype=np.float64))
    g_pos = np.atleast_2d(np.asarray(grad_e_pos, dtype=np.float64))
    if cfg.single_embedding:
        head_grads = {"head": g_neg + g_pos}
    else:
        head_grads = {"head_neg": g_neg, "head_pos": g_pos}

    grads = {}
    h = cache.inputs[-1]
    grad_h = np.zeros_like(h)
    for name, gu in head_grads.items():
        u, norms = cache.heads[name]
        gv = _normalize_backward(u, norms, gu)
        grads[f"{name}.W"] = gv.T @ h
        grads[f"{name}.b"] = gv.sum(axis=0)
        grad_h = grad_h + gv @ a[f"{name}.W"]
    for l in reversed(range(len(cfg.trunk_dims))):
        gz = grad_h * (cache.pre[l] > 0.0)
        grads[f"trunk.{l}.W"] = gz.T @ cache.inputs[l]
        grads[f"trunk.{l}.b"] = gz.sum(axis=0)
        grad_h = gz @ a[f"trunk.{l}.W"]
    if cache.squeeze:
        grad_h = grad_h[0]
    return grads, grad_h
