"""The dense deformation network.

Layout for a patch of side p (defaults in brackets)::

    concat(src, tgt)                          2 ch, p^3
    stem conv k^3                             base [16]
    dense block 1: units x (BN -> LReLU -> conv k^3, +growth ch)
    |-- global head: 1^3 conv -> 3 ch         global flow, p^3
    transition: 1^3 conv (halve ch) -> avg pool 2
    dense block 2 (same unit layout)          (p/2)^3
    local head: 1^3 conv -> 3 ch              local flow, (p/2)^3
    upsample x2 (values x2) ++ global flow -> 3^3 fusion conv -> fused flow, p^3
"""
from __future__ import annotations

import hashlib
import json
from collections import namedtuple
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError

FUSION_KERNEL = 3
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

Flows = namedtuple("Flows", ["global_flow", "local_flow", "fused_flow"])


@dataclass(frozen=True)
class DdnConfig:
    patch_size: int = 32
    units_per_block: int = 4
    growth: int = 8
    kernel: int = 3
    leaky_slope: float = 0.2
    base_channels: int = 16

    def __post_init__(self):
        if self.patch_size < 4 or self.patch_size % 2:
            raise ConfigError(f"patch_size must be even and >= 4, got {self.patch_size}")
        if self.units_per_block < 1:
            raise ConfigError("units_per_block must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.growth < 1 or self.base_channels < 1:
            raise ConfigError("growth and base_channels must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @property
    def block1_out(self):
        return self.base_channels + self.units_per_block * self.growth

    @property
    def transition_out(self):
        return max(1, self.block1_out // 2)

    @property
    def block2_out(self):
        return self.transition_out + self.units_per_block * self.growth


@dataclass
class Parameter:
    name: str
    tensor: ad.Tensor
    trainable: bool = True


class DdnModel:
    """Configuration plus an ordered, named parameter set."""

    def __init__(self, config: DdnConfig, params: dict):
        self.config = config
        self.params = params

    def __getitem__(self, name):
        return self.params[name].tensor

    def trainable(self):
        return [p for p in self.params.values() if p.trainable]

    def state(self) -> dict:
        return {name: p.tensor.data for name, p in self.params.items()}

    def astype(self, dtype) -> "DdnModel":
        params = {name: Parameter(name, ad.Tensor(p.tensor.data.astype(dtype), p.trainable, name),
                                  p.trainable)
                  for name, p in self.params.items()}
        return DdnModel(self.config, params)

    def copy(self) -> "DdnModel":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).tensor.dtype


def _layer_specs(cfg: DdnConfig):
    """(name, shape, kind) for every parameter, in a fixed order."""
    k = cfg.kernel
    specs = []

    def conv(name, cout, cin, ksize, kind):
        specs.append((f"{name}.weight", (cout, cin, ksize, ksize, ksize), kind))
        specs.append((f"{name}.bias", (cout,), "bias"))

    def block(prefix, cin):
        for u in range(cfg.units_per_block):
            c = cin + u * cfg.growth
            unit = f"{prefix}.unit{u}"
            specs.append((f"{unit}.bn.gamma", (c,), "ones"))
            specs.append((f"{unit}.bn.beta", (c,), "bias"))
            specs.append((f"{unit}.bn.running_mean", (c,), "stat_mean"))
            specs.append((f"{unit}.bn.running_var", (c,), "stat_var"))
            conv(f"{unit}.conv", cfg.growth, c, k, "he")

    conv("stem", cfg.base_channels, 2, k, "he")
    block("block1", cfg.base_channels)
    conv("global_head", 3, cfg.block1_out, 1, "head")
    conv("transition", cfg.transition_out, cfg.block1_out, 1, "he")
    block("block2", cfg.transition_out)
    conv("local_head", 3, cfg.block2_out, 1, "head")
    conv("fusion", 3, 6, FUSION_KERNEL, "zero")
    return specs


def build_ddn(config: DdnConfig, seed: int = 0, dtype=np.float32) -> DdnModel:
    """Deterministically initialise a model.

    Conv weights use He-scaled uniform init and zero bias. The fusion conv
    is all zeros so the fused flow (and the warp) starts as the identity;
    the global and local heads get a small random init so gradients can
    reach them once the fusion weights move.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _layer_specs(config):
        trainable = not kind.startswith("stat")
        if kind == "he":
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "head":
            fan_in = int(np.prod(shape[1:]))
            bound = 0.01 * np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind in ("ones", "stat_var"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensor = ad.Tensor(data.astype(dtype), requires_grad=trainable, name=name)
        params[name] = Parameter(name, tensor, trainable)
    return DdnModel(config, params)


def count_params(model: DdnModel) -> int:
    return int(sum(p.tensor.data.size for p in model.params.values() if p.trainable))


def _dense_block(model, prefix, x, training):
    cfg = model.config
    feats = [x]
    for u in range(cfg.units_per_block):
        unit = f"{prefix}.unit{u}"
        inp = feats[0] if len(feats) == 1 else ad.concat_channels(feats)
        h = ad.batch_norm(inp, model[f"{unit}.bn.gamma"], model[f"{unit}.bn.beta"],
                          model[f"{unit}.bn.running_mean"], model[f"{unit}.bn.running_var"],
                          training=training, momentum=BN_MOMENTUM, eps=BN_EPS)
        h = ad.leaky_relu(h, cfg.leaky_slope)
        h = ad.conv3d(h, model[f"{unit}.conv.weight"], model[f"{unit}.conv.bias"])
        feats.append(h)
    return ad.concat_channels(feats)


def _conv(model, name, x, **kw):
    return ad.conv3d(x, model[f"{name}.weight"], model[f"{name}.bias"], **kw)


def _as_batch(x, p, dtype):
    x = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (p, p, p):
        raise ValueError(f"expected patches of side {p}, got shape {x.shape}")
    return ad.Tensor(x.astype(dtype, copy=False))


def forward(model: DdnModel, src, tgt, mode="infer") -> Flows:
    """Run the network on (N, 1, p, p, p) source/target patches (or bare p^3 arrays)."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = model.config
    p = cfg.patch_size
    training = mode == "train"
    src = _as_batch(src, p, model.dtype)
    tgt = _as_batch(tgt, p, model.dtype)
    if src.shape != tgt.shape:
        raise ValueError(f"source {src.shape} and target {tgt.shape} batches differ")

    x = ad.concat_channels([src, tgt])
    x = _conv(model, "stem", x)
    f1 = _dense_block(model, "block1", x, training)
    global_flow = _conv(model, "global_head", f1)
    t = _conv(model, "transition", f1)
    t = ad.avg_pool3d(t, 2)
    f2 = _dense_block(model, "block2", t, training)
    local_flow = _conv(model, "local_head", f2)
    up = ad.scale(ad.upsample_trilinear(local_flow, 2), 2.0)
    fused = _conv(model, "fusion", ad.concat_channels([up, global_flow]))

    n = src.shape[0]
    half = p // 2
    assert global_flow.shape == (n, 3, p, p, p)
    assert local_flow.shape == (n, 3, half, half, half)
    assert fused.shape == (n, 3, p, p, p)
    if not np.all(np.isfinite(fused.data)):
        raise NumericError("non-finite displacement predicted")
    return Flows(global_flow, local_flow, fused)


def predict_flow(model: DdnModel, src_patch, tgt_patch) -> np.ndarray:
    """Inference-mode fused flow for a single p^3 patch pair, shape (3, p, p, p)."""
    return forward(model, src_patch, tgt_patch, "infer").fused_flow.data[0]
