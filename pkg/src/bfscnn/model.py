"""Fully-convolutional BFS extraction network: assembly, training, checkpoints.

The network maps a peak-normalized distributed spectrum of shape
``(n_freq, N, 1, batch)`` to normalized BFS predictions ``(1, N, 1, batch)``.
Three stages:

* stem - 3x3 conv (64 filters) + BN + ReLU, then 2x1 max pooling (151 -> 76)
* residual stage - six bottleneck blocks, conv 1x1 / 3x3 / 1x1 at 64 channels
* head - seven Mx1 convolutions collapsing the frequency axis 76 -> 1

Time-axis extent is preserved everywhere (stride 1, same padding or width-1
kernels), which is what makes inference on any number of traces possible.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .nn import BatchNormLayer, ConvLayer
from .spectra import (DEFAULT_POINTS, BfsTrace, DistributedBgs, SimRanges, SweepRange,
                      make_training_batch, peak_normalize, resample)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BFSN"
CHECKPOINT_VERSION = 1

# named random sub-streams derived from the single user seed
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_SHUFFLE = 2


class ArchitectureError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    kernel: Tuple[int, int]
    channels: int
    stride: Tuple[int, int] = (1, 1)
    padding: str = "same"
    bn: bool = True
    relu: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ConvSpec":
        return cls(tuple(d["kernel"]), d["channels"], tuple(d["stride"]), d["padding"],
                   d["bn"], d["relu"])


def default_head(channels: int = 64) -> Tuple[ConvSpec, ...]:
    return (
        ConvSpec((3, 1), channels),                                   # 76
        ConvSpec((7, 1), channels, (2, 1), "valid"),                  # 35
        ConvSpec((7, 1), channels, (2, 1), "valid"),                  # 15
        ConvSpec((7, 1), channels, (2, 1), "valid"),                  # 5
        ConvSpec((3, 1), channels, padding="valid"),                  # 3
        ConvSpec((3, 1), channels, padding="valid"),                  # 1
        ConvSpec((3, 1), 1, bn=False, relu=False),                    # 1
    )


@dataclass(frozen=True)
class ArchitectureSpec:
    n_freq: int = DEFAULT_POINTS
    channels: int = 64
    stem_kernel: Tuple[int, int] = (3, 3)
    pool_extent: Tuple[int, int] = (2, 1)
    pool_stride: Tuple[int, int] = (2, 1)
    pool_ceil: bool = True
    n_resblocks: int = 6
    res_kernel: Tuple[int, int] = (3, 3)
    head: Tuple[ConvSpec, ...] = field(default_factory=default_head)

    @classmethod
    def small(cls, channels: int = 4, n_resblocks: int = 2) -> "ArchitectureSpec":
        """Same layout with fewer channels and blocks, for tests."""
        return cls(channels=channels, n_resblocks=n_resblocks, head=default_head(channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = [asdict(h) for h in self.head]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        for key in ("stem_kernel", "pool_extent", "pool_stride", "res_kernel"):
            d[key] = tuple(d[key])
        d["head"] = tuple(ConvSpec.from_dict(h) for h in d["head"])
        return cls(**d)

    def frequency_schedule(self) -> List[int]:
        """Frequency extent after the stem, the pooling and each head layer."""
        h = nn.conv_output_size(self.n_freq, self.stem_kernel[0], 1, "same")
        sizes = [h]
        h = nn.pool_output_size(h, self.pool_extent[0], self.pool_stride[0], self.pool_ceil)
        sizes.append(h)
        for c in self.head:
            h = nn.conv_output_size(h, c.kernel[0], c.stride[0], c.padding)
            sizes.append(h)
        return sizes

    def time_radius(self) -> int:
        """How many neighboring traces on each side influence one output."""
        r = self.stem_kernel[1] // 2 + self.n_resblocks * (self.res_kernel[1] // 2)
        r += self.pool_extent[1] // 2
        return r + sum(c.kernel[1] // 2 for c in self.head)

    def validate(self) -> "ArchitectureSpec":
        sizes = self.frequency_schedule()
        if min(sizes) < 1 or sizes[-1] != 1:
            raise ArchitectureError(f"frequency axis does not reach 1: {sizes}")
        if self.pool_extent[1] != 1 or self.pool_stride[1] != 1:
            raise ArchitectureError("pooling must not touch the time axis")
        for c in self.head:
            if c.stride[1] != 1 or (c.kernel[1] > 1 and c.padding != "same"):
                raise ArchitectureError(f"head layer {c} shrinks the time axis")
        if self.stem_kernel[1] > 1 and self.stem_kernel[1] % 2 == 0:
            raise ArchitectureError("even time kernels cannot keep traces aligned")
        if not self.head or self.head[-1].channels != 1:
            raise ArchitectureError("the last head layer must have one output channel")
        return self


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def _glorot(rng, kh, kw, c_in, c_out):
    limit = np.sqrt(6.0 / (kh * kw * (c_in + c_out)))
    return rng.uniform(-limit, limit, (kh, kw, c_in, c_out))


class ConvUnit:
    """Convolution, optional batch norm, optional ReLU."""

    def __init__(self, conv: ConvLayer, bn: Optional[BatchNormLayer], use_relu: bool):
        self.conv, self.bn, self.use_relu = conv, bn, use_relu

    @classmethod
    def create(cls, rng, c_in, spec: ConvSpec) -> "ConvUnit":
        kh, kw = spec.kernel
        conv = ConvLayer(_glorot(rng, kh, kw, c_in, spec.channels), np.zeros(spec.channels),
                         spec.stride, spec.padding)
        bn = BatchNormLayer.fresh(spec.channels) if spec.bn else None
        return cls(conv, bn, spec.relu)

    def named(self, prefix):
        yield f"{prefix}.w", self.conv, "w"
        yield f"{prefix}.b", self.conv, "b"
        if self.bn is not None:
            yield f"{prefix}.bn.gamma", self.bn, "gamma"
            yield f"{prefix}.bn.beta", self.bn, "beta"

    def buffers(self, prefix):
        if self.bn is not None:
            yield f"{prefix}.bn.running_mean", self.bn, "running_mean"
            yield f"{prefix}.bn.running_var", self.bn, "running_var"

    def forward(self, x, mode, relu_after=True):
        z, c_conv = nn.conv2d_forward(x, self.conv)
        c_bn = None
        if self.bn is not None:
            z, c_bn = nn.batchnorm_forward(z, self.bn, mode)
        out = nn.relu(z) if (self.use_relu and relu_after) else z
        return out, (c_conv, c_bn, z)

    def backward(self, g, cache, grads, prefix, relu_after=True):
        c_conv, c_bn, z = cache
        if self.use_relu and relu_after:
            g = nn.relu_backward(g, z)
        if self.bn is not None:
            g, grads[f"{prefix}.bn.gamma"], grads[f"{prefix}.bn.beta"] = \
                nn.batchnorm_backward(g, c_bn, self.bn)
        g, grads[f"{prefix}.w"], grads[f"{prefix}.b"] = nn.conv2d_backward(g, c_conv, self.conv)
        return g


class ResBlock:
    """Bottleneck residual block with an identity skip added before the last ReLU."""

    def __init__(self, units: Sequence[ConvUnit]):
        self.units = list(units)

    @classmethod
    def create(cls, rng, channels, kernel=(3, 3)) -> "ResBlock":
        return cls([
            ConvUnit.create(rng, channels, ConvSpec((1, 1), channels)),
            ConvUnit.create(rng, channels, ConvSpec(kernel, channels)),
            ConvUnit.create(rng, channels, ConvSpec((1, 1), channels, relu=False)),
        ])

    def named(self, prefix):
        for k, u in enumerate(self.units):
            yield from u.named(f"{prefix}.conv{k + 1}")

    def buffers(self, prefix):
        for k, u in enumerate(self.units):
            yield from u.buffers(f"{prefix}.conv{k + 1}")

    def forward(self, x, mode):
        caches = []
        h = x
        for u in self.units:
            h, c = u.forward(h, mode)
            caches.append(c)
        s = h + x
        return nn.relu(s), (caches, s)

    def backward(self, g, cache, grads, prefix):
        caches, s = cache
        g = nn.relu_backward(g, s)
        skip = g
        for k in reversed(range(len(self.units))):
            g = self.units[k].backward(g, caches[k], grads, f"{prefix}.conv{k + 1}")
        return g + skip


class BfsNetwork:
    def __init__(self, spec: ArchitectureSpec, stem: ConvUnit, blocks: List[ResBlock],
                 head: List[ConvUnit]):
        self.spec, self.stem, self.blocks, self.head = spec, stem, blocks, head

    # parameter bookkeeping -------------------------------------------------
    def _slots(self):
        yield from self.stem.named("stem")
        for i, b in enumerate(self.blocks):
            yield from b.named(f"res{i}")
        for i, u in enumerate(self.head):
            yield from u.named(f"head{i}")

    def _buffer_slots(self):
        yield from self.stem.buffers("stem")
        for i, b in enumerate(self.blocks):
            yield from b.buffers(f"res{i}")
        for i, u in enumerate(self.head):
            yield from u.buffers(f"head{i}")

    def params(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name, in architecture order (live references)."""
        return {name: getattr(obj, attr) for name, obj, attr in self._slots()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {name: getattr(obj, attr) for name, obj, attr in self._buffer_slots()}

    def state(self) -> Dict[str, np.ndarray]:
        return {**self.params(), **self.buffers()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        slots = list(self._slots()) + list(self._buffer_slots())
        expected = {name for name, _, _ in slots}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise CheckpointError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, obj, attr in slots:
            cur = getattr(obj, attr)
            new = np.array(state[name], dtype=np.float64)
            if new.shape != cur.shape:
                raise CheckpointError(f"{name}: shape {new.shape} != expected {cur.shape}")
            setattr(obj, attr, new)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params().values())

    # passes ------------------------------------------------------------------
    def forward(self, x: np.ndarray, mode: str = "infer"):
        if x.ndim != 4 or x.shape[0] != self.spec.n_freq or x.shape[2] != 1:
            raise nn.ShapeError(f"expected input ({self.spec.n_freq}, N, 1, batch), got {x.shape}")
        h, c_stem = self.stem.forward(x, mode)
        h, c_pool = nn.maxpool_forward(h, self.spec.pool_extent, self.spec.pool_stride,
                                       self.spec.pool_ceil)
        c_blocks = []
        for b in self.blocks:
            h, c = b.forward(h, mode)
            c_blocks.append(c)
        c_head = []
        for u in self.head:
            h, c = u.forward(h, mode)
            c_head.append(c)
        return h, (c_stem, c_pool, c_blocks, c_head)

    def backward(self, grad_out: np.ndarray, cache) -> Dict[str, np.ndarray]:
        c_stem, c_pool, c_blocks, c_head = cache
        grads: Dict[str, np.ndarray] = {}
        g = grad_out
        for i in reversed(range(len(self.head))):
            g = self.head[i].backward(g, c_head[i], grads, f"head{i}")
        for i in reversed(range(len(self.blocks))):
            g = self.blocks[i].backward(g, c_blocks[i], grads, f"res{i}")
        g = nn.maxpool_backward(g, c_pool)
        self.stem.backward(g, c_stem, grads, "stem")
        return {name: grads[name] for name in self.params()}


def build_network(spec: Optional[ArchitectureSpec] = None,
                  rng: Optional[np.random.Generator] = None) -> BfsNetwork:
    spec = (spec or ArchitectureSpec()).validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    c = spec.channels
    stem = ConvUnit.create(rng, 1, ConvSpec(spec.stem_kernel, c))
    blocks = [ResBlock.create(rng, c, spec.res_kernel) for _ in range(spec.n_resblocks)]
    head = []
    c_in = c
    for hs in spec.head:
        head.append(ConvUnit.create(rng, c_in, hs))
        c_in = hs.channels
    return BfsNetwork(spec, stem, blocks, head)


def count_parameters(spec: ArchitectureSpec) -> int:
    """Trainable parameter count from the layer list alone."""
    def conv(kh, kw, ci, co, bn):
        return kh * kw * ci * co + co + (2 * co if bn else 0)

    c = spec.channels
    total = conv(*spec.stem_kernel, 1, c, True)
    rk = spec.res_kernel
    total += spec.n_resblocks * (conv(1, 1, c, c, True) + conv(*rk, c, c, True)
                                 + conv(1, 1, c, c, True))
    c_in = c
    for h in spec.head:
        total += conv(*h.kernel, c_in, h.channels, h.bn)
        c_in = h.channels
    return total


# ---------------------------------------------------------------------------
# data <-> tensors
# ---------------------------------------------------------------------------

def bgs_to_tensor(data: DistributedBgs, n_freq: int = DEFAULT_POINTS) -> np.ndarray:
    """Resample to ``n_freq`` points, peak-normalize, shape (n_freq, N, 1, 1)."""
    data = resample(data, n_freq)
    return peak_normalize(data.matrix)[:, :, None, None]


def forward_bfs(network: BfsNetwork, x, mode: str = "infer"):
    """Normalized BFS predictions.

    ``x`` is a DistributedBgs (returns a length-N vector) or a tensor of shape
    ``(n_freq, N, 1, batch)`` (returns ``(N, batch)``).  In train mode the
    backprop cache is returned as a second value.
    """
    if isinstance(x, DistributedBgs):
        if x.sweep.n_points != network.spec.n_freq:
            raise nn.ShapeError(
                f"data has {x.sweep.n_points} frequency points, network expects "
                f"{network.spec.n_freq}; resample first")
        tensor = x.matrix[:, :, None, None]
    else:
        tensor = x
    out, cache = network.forward(tensor, mode)
    pred = out[0, :, 0, :]
    if isinstance(x, DistributedBgs):
        pred = pred[:, 0]
    return (pred, cache) if mode == "train" else pred


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 22
    updates_per_epoch: int = 375
    batch_size: int = 8
    traces: int = 224
    alpha0: float = 1e-3
    decay: float = 1e-4
    decay_rule: str = "inverse"
    seed: int = 0
    corpus_batches: int = 0
    anneal_from: int = 0
    anneal_factor: float = 0.1
    precision: str = "float64"

    def __post_init__(self):
        if self.epochs < 0 or self.updates_per_epoch < 1 or self.batch_size < 1 or self.traces < 1:
            raise ValueError("epochs must be >= 0; updates, batch size and traces >= 1")
        if self.alpha0 < 0 or self.decay < 0:
            raise ValueError("learning rate and decay must be non-negative")
        if self.decay_rule not in ("inverse", "linear"):
            raise ValueError(f"unknown decay rule {self.decay_rule!r}")
        if self.corpus_batches < 0:
            raise ValueError("corpus_batches must be >= 0")
        if self.anneal_from < 0 or not 0 < self.anneal_factor <= 1:
            raise ValueError("anneal_from must be >= 0 and anneal_factor in (0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def total_updates(self) -> int:
        return self.epochs * self.updates_per_epoch

    @property
    def traces_per_epoch(self) -> int:
        return self.updates_per_epoch * self.batch_size * self.traces

    def learning_rate(self, t: int) -> float:
        """Step size for update ``t`` (0-based).

        With ``anneal_from > 0`` the step is scaled by ``anneal_factor`` from
        that update on.
        """
        if self.decay_rule == "inverse":
            rate = self.alpha0 / (1.0 + self.decay * t)
        else:
            rate = max(self.alpha0 - self.decay * t, 0.0)
        if self.anneal_from and t >= self.anneal_from:
            rate *= self.anneal_factor
        return rate


def sample_batch(config: TrainConfig, ranges: SimRanges, sweep: SweepRange,
                 rng: np.random.Generator):
    """``batch_size`` independent distributed spectra as one input tensor and target."""
    x = np.empty((config.batch_size, sweep.n_points, config.traces, 1))
    y = np.empty((config.batch_size, 1, config.traces, 1))
    for k in range(config.batch_size):
        data, target = make_training_batch(config.traces, ranges, sweep, rng)
        x[k, :, :, 0] = data.matrix
        y[k, 0, :, 0] = target
    return nn.from_channel_last(x), nn.from_channel_last(y)


def _data_rng(seed, t):
    return np.random.default_rng([seed, STREAM_DATA, t])


def train(config: TrainConfig = TrainConfig(), ranges: SimRanges = SimRanges(),
          sweep: Optional[SweepRange] = None, spec: Optional[ArchitectureSpec] = None,
          progress_every: int = 0):
    """Train on freshly simulated batches; returns (checkpoint, per-update losses).

    With ``corpus_batches > 0`` a fixed set of batches is simulated once and
    revisited in a shuffled order each epoch instead. ``precision`` sets the
    dtype of activations and gradients; parameters and Adam moments stay float64.
    """
    spec = (spec or ArchitectureSpec()).validate()
    sweep = sweep or SweepRange(n_points=spec.n_freq)
    if sweep.n_points != spec.n_freq:
        raise ArchitectureError("sweep point count must match the network input")
    net = build_network(spec, np.random.default_rng([config.seed, STREAM_INIT]))
    adam = nn.AdamState(alpha=config.alpha0)
    corpus = None
    if config.corpus_batches:
        corpus = [sample_batch(config, ranges, sweep, _data_rng(config.seed, i))
                  for i in range(config.corpus_batches)]
        shuffle_rng = np.random.default_rng([config.seed, STREAM_SHUFFLE])
    losses: List[float] = []
    t = 0
    started = time.perf_counter()
    for epoch in range(config.epochs):
        if corpus is not None:
            order = shuffle_rng.permutation(config.updates_per_epoch) % len(corpus)
        for k in range(config.updates_per_epoch):
            if corpus is None:
                x, y = sample_batch(config, ranges, sweep, _data_rng(config.seed, t))
            else:
                x, y = corpus[order[k]]
            x, y = x.astype(config.precision, copy=False), y.astype(config.precision, copy=False)
            out, cache = net.forward(x, "train")
            loss, grad = nn.mse_loss(out, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at update {t} (epoch {epoch})")
            grads = net.backward(grad, cache)
            del cache
            try:
                nn.adam_step(net.params(), grads, adam, alpha=config.learning_rate(t))
            except nn.NumericError as exc:
                raise TrainingError(f"update {t}: {exc}") from exc
            losses.append(loss)
            t += 1
            if progress_every and t % progress_every == 0:
                log.info("update %d/%d epoch %d loss %.3e (%.0f s)", t, config.total_updates,
                         epoch, np.mean(losses[-progress_every:]), time.perf_counter() - started)
    meta = {"train_config": asdict(config), "ranges": asdict(ranges),
            "final_loss": losses[-1] if losses else None, "updates": t}
    return checkpoint_from_network(net, meta), losses


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    spec: ArchitectureSpec
    records: Dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def checkpoint_from_network(net: BfsNetwork, metadata: Optional[dict] = None) -> ModelCheckpoint:
    records = {name: np.array(a, dtype=np.float64) for name, a in net.state().items()}
    return ModelCheckpoint(net.spec, records, dict(metadata or {}))


def network_from_checkpoint(ckpt: ModelCheckpoint) -> BfsNetwork:
    net = build_network(ckpt.spec, np.random.default_rng(0))
    net.load_state(ckpt.records)
    return net


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    meta = _canonical_json({"architecture": ckpt.spec.to_dict(), "metadata": ckpt.metadata})
    parts = [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.records))]
    for name, arr in ckpt.records.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    payload = b"".join(parts)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + digest + payload


def decode_checkpoint(buf: bytes) -> ModelCheckpoint:
    if len(buf) < 16:
        raise CheckpointError("checkpoint truncated: header incomplete")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload = buf[16:]
    if hashlib.blake2b(payload, digest_size=8).digest() != buf[8:16]:
        raise CheckpointError("checksum mismatch: checkpoint corrupt or truncated")
    try:
        off = 0
        (n_meta,) = struct.unpack_from("<I", payload, off)
        off += 4
        meta = json.loads(payload[off:off + n_meta].decode())
        off += n_meta
        (n_rec,) = struct.unpack_from("<I", payload, off)
        off += 4
        records = {}
        for _ in range(n_rec):
            (n_name,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + n_name].decode()
            off += n_name
            (ndim,) = struct.unpack_from("<B", payload, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            if name in records:
                raise CheckpointError(f"duplicate record {name!r}")
            records[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint payload: {exc}") from exc
    if off != len(payload):
        raise CheckpointError("trailing bytes after last record")
    spec = ArchitectureSpec.from_dict(meta["architecture"])
    return ModelCheckpoint(spec, records, meta["metadata"], version)


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> ModelCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

class InferencePlan:
    """Inference-only copy of a network with batch norm folded into the convolutions.

    ``BN(conv(x))`` with running statistics is the convolution with weights
    scaled by ``gamma / sqrt(var + eps)`` and a shifted bias, so inference
    needs one pass per convolution.  ``dtype`` selects the arithmetic
    precision; float32 roughly halves the run time on CPU.
    """

    def __init__(self, net: BfsNetwork, dtype=np.float32, fused: bool = True):
        self.spec = net.spec
        self.dtype = np.dtype(dtype)
        self.stem = self._fold(net.stem)
        self.blocks = [[self._fold(u) for u in b.units] for b in net.blocks]
        self.head = [self._fold(u) for u in net.head]
        self.fused = fused and self._fusable()

    def _fold(self, unit: ConvUnit):
        w, b = unit.conv.w, unit.conv.b
        if unit.bn is not None:
            bn = unit.bn
            scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
            w = w * scale
            b = (b - bn.running_mean) * scale + bn.beta
        layer = ConvLayer(w.astype(self.dtype), b.astype(self.dtype), unit.conv.stride,
                          unit.conv.padding)
        return layer, unit.use_relu

    @staticmethod
    def _apply(x, folded):
        layer, use_relu = folded
        out, _ = nn.conv2d_forward(x, layer)
        if use_relu:
            np.maximum(out, 0, out=out)
        return out

    def _fusable(self) -> bool:
        for units in self.blocks:
            kernels = [layer.kernel for layer, _ in units]
            if len(units) != 3 or kernels[0] != (1, 1) or kernels[2] != (1, 1):
                return False
            if any(k % 2 == 0 for k in kernels[1]):
                return False
            if [r for _, r in units] != [True, True, False]:
                return False
            if any(layer.stride != (1, 1) or layer.padding != "same" for layer, _ in units):
                return False
            if any(layer.w.shape[2] != layer.w.shape[3] for layer, _ in units):
                return False
        return len({units[1][0].kernel for units in self.blocks}) <= 1

    def _blocks_fused(self, h: np.ndarray, tile: int = 2048) -> np.ndarray:
        """All residual blocks in one pass over row tiles that stay in cache.

        Activations are kept zero-padded in a time-major flat layout
        (batch, time, freq, channel), so a tap of the middle convolution is a
        row shift of ``j * freq_padded + i`` and the halo a tile needs is a
        couple of spectra rather than a couple of fiber lengths.
        """
        n_f, n_t, ch, bsz = h.shape
        kh, kw = self.blocks[0][1][0].kernel
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        fp, tp = n_f + 2 * ph, n_t + 2 * pw
        dt = self.dtype
        cur = np.zeros((bsz, tp, fp, ch), dt)
        cur[:, pw:pw + n_t, ph:ph + n_f] = nn.to_channel_last(h).transpose(0, 2, 1, 3)
        mask = np.zeros((bsz, tp, fp, 1), dt)
        mask[:, pw:pw + n_t, ph:ph + n_f] = 1
        cur, mask = cur.reshape(-1, ch), mask.reshape(-1, 1)
        nxt = np.zeros_like(cur)
        n_rows = cur.shape[0]
        off = pw * fp + ph
        a = np.empty((tile + 2 * off, ch), dt)
        c = np.empty((tile, ch), dt)
        for units in self.blocks:
            (l1, _), (l2, _), (l3, _) = units
            taps = [(j * fp + i, l2.w[i, j]) for i in range(kh) for j in range(kw)]
            for q0 in range(off, n_rows - off, tile):
                q1 = min(q0 + tile, n_rows - off)
                m = q1 - q0
                av = a[:m + 2 * off]
                np.matmul(cur[q0 - off:q1 + off], l1.w[0, 0], out=av)
                av += l1.b
                np.maximum(av, 0, out=av)
                av *= mask[q0 - off:q1 + off]
                cv = c[:m]
                nn._shifted_taps(av, taps, cv, m, first_overwrites=True)
                cv += l2.b
                np.maximum(cv, 0, out=cv)
                ov = nxt[q0:q1]
                np.matmul(cv, l3.w[0, 0], out=ov)
                ov += l3.b
                ov += cur[q0:q1]
                np.maximum(ov, 0, out=ov)
                ov *= mask[q0:q1]
            cur, nxt = nxt, cur
        out = cur.reshape(bsz, tp, fp, ch)[:, pw:pw + n_t, ph:ph + n_f].transpose(0, 2, 1, 3)
        return nn.from_channel_last(np.ascontiguousarray(out))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """(n_freq, N, 1, batch) -> (1, N, 1, batch)."""
        h = self._apply(np.asarray(x, dtype=self.dtype), self.stem)
        h, _ = nn.maxpool_forward(h, self.spec.pool_extent, self.spec.pool_stride,
                                  self.spec.pool_ceil, need_cache=False)
        if self.blocks and self.fused:
            h = self._blocks_fused(h)
        else:
            for units in self.blocks:
                r = h
                for folded in units:
                    r = self._apply(r, folded)
                r += h
                h = np.maximum(r, 0, out=r)
        for folded in self.head:
            h = self._apply(h, folded)
        return h


def infer_distributed(model, data: DistributedBgs, chunk: int = 2048,
                      precision: str = "float32") -> BfsTrace:
    """Extract the BFS trace of a distributed spectrum with a trained network.

    ``model`` may be a checkpoint, a network or a prepared InferencePlan.
    Long fibers are processed in windows of ``chunk`` traces padded with the
    network's time receptive radius on each side, so the result matches a
    single pass over the whole fiber.
    """
    if isinstance(model, InferencePlan):
        plan = model
    else:
        net = network_from_checkpoint(model) if isinstance(model, ModelCheckpoint) else model
        plan = InferencePlan(net, np.dtype(precision))
    x = bgs_to_tensor(data, plan.spec.n_freq)
    n = x.shape[1]
    halo = plan.spec.time_radius()
    if n <= chunk + 2 * halo:
        values = plan(x)[0, :, 0, 0].astype(np.float64)
    else:
        values = np.empty(n)
        for s in range(0, n, chunk):
            e = min(s + chunk, n)
            lo, hi = max(s - halo, 0), min(e + halo, n)
            pred = plan(np.ascontiguousarray(x[:, lo:hi]))[0, :, 0, 0]
            values[s:e] = pred[s - lo:s - lo + (e - s)]
    return BfsTrace(values, data.sweep, True, diagnostics={"precision": plan.dtype.name})
