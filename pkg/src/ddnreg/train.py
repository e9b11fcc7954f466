"""Unsupervised training: seeded minibatches, Adam, checkpoints and a CSV log.

DDNC checkpoint layout (little-endian)::

    "DDNC", u32 version (1), u32 n + n bytes of UTF-8 JSON config, u32 tensor count
    per tensor: u16 name length + name, u8 ndim, ndim x u32 dims, f32 data

Optimizer state travels as extra tensors named ``opt.m.<param>``,
``opt.v.<param>`` and ``opt.step``.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .errors import ConfigError, FormatError, NumericError
from .loss import LossConfig, loss_terms
from .model import DdnConfig, DdnModel, Parameter, _layer_specs, forward
from .patches import PatchPairSet

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DDNC"
VERSION = 1
OPT_PREFIX = "opt."
LOG_HEADER = ("step", "sim", "smooth", "total", "ms")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    steps: int = 1000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class TrainLog:
    """Per-step (step, sim, smooth, total, ms). Equality ignores the wall time."""

    records: list = field(default_factory=list)

    def append(self, step, sim, smooth, total, ms):
        self.records.append((int(step), float(sim), float(smooth), float(total), float(ms)))

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, TrainLog):
            return NotImplemented
        return [r[:4] for r in self.records] == [r[:4] for r in other.records]

    def column(self, name):
        i = LOG_HEADER.index(name)
        return np.array([r[i] for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for step, sim, smooth, total, ms in self.records:
                w.writerow([step, repr(sim), repr(smooth), repr(total), f"{ms:.3f}"])


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """Bias-corrected Adam update of ``params`` (name -> array) in place."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    lr_t = cfg.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr_t * m / (np.sqrt(v) + cfg.adam_eps)).astype(p.dtype)
    return state


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Dataset rows used at global ``step``: consecutive slices of per-epoch permutations."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.extend(perm[offset:offset + batch_size - len(out)].tolist())
    return np.array(out, dtype=np.int64)


def _limits(deterministic):
    # a single BLAS thread keeps every reduction in a fixed order
    return threadpool_limits(1) if deterministic else nullcontext()


def train(model: DdnModel, dataset: PatchPairSet, cfg: TrainConfig, state: AdamState = None,
          checkpoint_path=None, log_path=None):
    """Run ``cfg.steps`` Adam steps; returns (model, TrainLog, AdamState).

    The model is updated in place. Passing the state from a checkpoint
    continues the global step count and the minibatch stream exactly.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.patch_size != model.config.patch_size:
        raise ValueError(f"dataset patch size {dataset.patch_size} does not match model "
                         f"patch size {model.config.patch_size}")
    state = state if state is not None else AdamState()
    trainable = {p.name: p.tensor for p in model.trainable()}
    params = {name: t.data for name, t in trainable.items()}
    history = TrainLog()
    n = len(dataset)
    dtype = model.dtype

    with _limits(cfg.deterministic):
        for _ in range(cfg.steps):
            t0 = time.perf_counter()
            step = state.step
            idx = batch_indices(n, cfg.batch_size, cfg.seed, step)
            src = dataset.src[idx][:, None].astype(dtype)
            tgt = dataset.tgt[idx][:, None].astype(dtype)
            graph = ad.Graph()
            with graph:
                flows = forward(model, src, tgt, mode="train")
                total, sim, smooth = loss_terms(src, tgt, flows.fused_flow, cfg.loss)
            if not np.isfinite(total.item()):
                raise NumericError(f"non-finite loss at step {step}")
            grads = ad.backward(graph, total)
            adam_step(params, {name: grads[t] for name, t in trainable.items() if t in grads},
                      state, cfg)
            ms = 1000.0 * (time.perf_counter() - t0)
            history.append(step, sim.item(), smooth.item(), total.item(), ms)
            if step % 50 == 0:
                log.info("step %d sim %.5f smooth %.5f total %.5f (%.0f ms)",
                         step, sim.item(), smooth.item(), total.item(), ms)
            if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(model, state, checkpoint_path)
    if log_path:
        history.write_csv(log_path)
    return model, history, state


# ------------------------------------------------------------------ checkpoints

def _pack_tensor(name, arr):
    arr = np.asarray(arr, dtype="<f4")
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def checkpoint_to_bytes(model: DdnModel, state: AdamState = None) -> bytes:
    blob = model.config.to_json().encode()
    tensors = [(name, p.tensor.data) for name, p in model.params.items()]
    if state is not None:
        for name in model.params:
            if name in state.m:
                tensors.append((f"{OPT_PREFIX}m.{name}", state.m[name]))
                tensors.append((f"{OPT_PREFIX}v.{name}", state.v[name]))
        tensors.append((f"{OPT_PREFIX}step", np.array([state.step], dtype=np.float32)))
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    parts.extend(_pack_tensor(name, arr) for name, arr in tensors)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        st = struct.Struct(fmt)
        if self.pos + st.size > len(self.buf):
            raise FormatError("truncated checkpoint", len(self.buf))
        out = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return out

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint", len(self.buf))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def checkpoint_from_bytes(buf: bytes, expect: DdnConfig = None):
    """Parse a checkpoint; returns (model, AdamState or None)."""
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected DDNC", 0)
    rd = _Reader(buf)
    rd.pos = 4
    version, blob_len = rd.take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    blob_at = rd.pos
    try:
        config = DdnConfig(**json.loads(rd.raw(blob_len).decode()))
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"unreadable config blob: {exc}", blob_at) from None
    if expect is not None and expect.digest() != config.digest():
        raise ConfigError("checkpoint config hash differs from the expected configuration")
    (count,) = rd.take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = rd.take("<H")
        name = rd.raw(nlen).decode()
        (ndim,) = rd.take("<B")
        dims = rd.take(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(rd.raw(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = data
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes", rd.pos)

    params = {}
    for name, shape, kind in _layer_specs(config):
        if name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {name!r}")
        if tensors[name].shape != shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        trainable = not kind.startswith("stat")
        params[name] = Parameter(name, ad.Tensor(tensors[name], trainable, name), trainable)
    state = None
    if f"{OPT_PREFIX}step" in tensors:
        state = AdamState(step=int(tensors[f"{OPT_PREFIX}step"][0]))
        for name in params:
            if f"{OPT_PREFIX}m.{name}" in tensors:
                state.m[name] = tensors[f"{OPT_PREFIX}m.{name}"]
                state.v[name] = tensors[f"{OPT_PREFIX}v.{name}"]
    return DdnModel(config, params), state


def save_checkpoint(model: DdnModel, state: AdamState, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model, state))


def load_checkpoint(path, expect: DdnConfig = None):
    return checkpoint_from_bytes(Path(path).read_bytes(), expect)


def config_summary(cfg: TrainConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
