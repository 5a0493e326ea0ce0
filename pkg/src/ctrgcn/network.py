"""CTR-GCN assembly, cost accounting and checkpoint I/O.

A basic block is

    y = relu(BN(sum_k GC_k(x)) + down(x))          spatial module
    out = relu(TM(y) + residual(x))                 temporal module + block residual

with ``down``/``residual`` the identity when shapes allow and a 1x1 map plus
normalization otherwise.  The temporal module concatenates dilated temporal
convolutions, a max-pool branch and a plain strided 1x1 branch.

Maps that feed straight into a training-mode normalization carry no bias: the
normalization removes any per-channel shift, so such a bias would be a dead
parameter with an identically zero gradient.
"""

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError, FormatError
from .graph_conv import (
    AgcLayer,
    CtrGcLayer,
    DcGcLayer,
    LinearMap,
    Module,
    StGcLayer,
    ctr_gc_forward,
    parameter_role,
)
from .skeleton import SkeletonGraph, SkeletonSequence, adjacency_set, build_graph
from .tensor import Tensor

GC_VARIANTS = ("ctrgc", "stgc", "agc", "dcgc", "dcgc_star")


@dataclass(frozen=True)
class ModelConfig:
    graph: str = "ntu25"
    num_classes: int = 60
    in_channels: int = 3
    channels: Tuple[int, ...] = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
    strides: Tuple[int, ...] = (1, 1, 1, 1, 2, 1, 1, 2, 1, 1)
    gc: str = "ctrgc"
    gcs_per_block: int = 3
    r: int = 8
    corr_fn: str = "M1"
    sigma: str = "tanh"
    alpha_init: float = 0.0
    use_shared: bool = True
    use_refinement: bool = True
    agc_r: int = 4
    dcgc_groups: int = 16
    temporal_kernel: int = 5
    dilations: Tuple[int, ...] = (1, 2)
    pool_kernel: int = 3
    temporal_mode: str = "conv"
    num_persons: int = 2
    frames: int = 64

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))

    @property
    def base_channels(self) -> int:
        return self.channels[0]

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    def validate(self) -> "ModelConfig":
        if not self.channels or len(self.channels) != len(self.strides):
            raise ConfigurationError("channel plan and stride plan must be non-empty and equally long")
        if self.gc not in GC_VARIANTS:
            raise ConfigurationError(f"unknown graph convolution {self.gc!r}; known: {GC_VARIANTS}")
        if self.temporal_mode not in ("conv", "pool"):
            raise ConfigurationError(f"temporal_mode must be 'conv' or 'pool', got {self.temporal_mode!r}")
        branches = len(self.dilations) + 2
        for c in self.channels:
            if c < 1 or c % branches:
                raise ConfigurationError(f"block width {c} is not divisible by {branches} temporal branches")
        if any(s < 1 for s in self.strides):
            raise ConfigurationError("strides must be positive")
        if self.temporal_kernel % 2 == 0 or self.pool_kernel % 2 == 0:
            raise ConfigurationError("temporal kernels must be odd for symmetric padding")
        if min(self.num_classes, self.in_channels, self.gcs_per_block, self.r, self.num_persons, self.frames) < 1:
            raise ConfigurationError("counts in the model config must be positive")
        if self.gc == "dcgc":
            for c in self.channels:
                if c % self.dcgc_groups:
                    raise ConfigurationError(f"{self.dcgc_groups} groups do not divide width {c}")
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    def hash64(self) -> int:
        return int.from_bytes(hashlib.sha256(self.canonical().encode()).digest()[:8], "little")


def ntu_config(num_classes: int = 60, **changes) -> ModelConfig:
    return ModelConfig(num_classes=num_classes, **changes)


def nwucla_config(**changes) -> ModelConfig:
    return ModelConfig(graph="nwucla20", num_classes=10, num_persons=1, frames=52, **changes)


# -- building blocks ---------------------------------------------------------

class BatchNorm(Module):
    """Per-channel normalization over every axis but the last."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = tn.parameter(np.ones(channels))
        self.beta = tn.parameter(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self._momentum = momentum
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = tn.reduce("mean", x, axes, keepdims=True)
            xc = x - mu
            var = tn.reduce("mean", xc * xc, axes, keepdims=True)
            count = x.size // x.shape[-1]
            m = self._momentum
            self.running_mean.data[...] = (1 - m) * self.running_mean.data + m * mu.data.reshape(-1)
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            self.running_var.data[...] = (1 - m) * self.running_var.data + m * unbiased
            return xc * tn.power(var + self._eps, -0.5) * self.gamma + self.beta
        inv = 1.0 / np.sqrt(self.running_var.data + self._eps)
        return (x - self.running_mean.data) * (self.gamma * inv) + self.beta


class TemporalConv(Module):
    """Convolution along frames, ``[B, T, N, C] -> [B, T', N, C']``, zero padded."""

    def __init__(self, in_channels, out_channels, kernel, rng, dilation=1, stride=1, bias=True):
        self.kernel, self.dilation, self.stride = kernel, dilation, stride
        self.conv = LinearMap(kernel * in_channels, out_channels, rng, bias=bias)

    def out_frames(self, frames: int) -> int:
        return (frames - 1) // self.stride + 1

    def forward(self, x: Tensor) -> Tensor:
        t = x.shape[1]
        t_out = self.out_frames(t)
        if self.kernel == 1:
            taps = [x[:, ::self.stride]] if self.stride > 1 else [x]
        else:
            p = (self.kernel - 1) * self.dilation // 2
            xp = tn.pad(x, ((0, 0), (p, p), (0, 0), (0, 0)))
            span = self.stride * (t_out - 1) + 1
            taps = [xp[:, q * self.dilation:q * self.dilation + span:self.stride] for q in range(self.kernel)]
        stacked = taps[0] if len(taps) == 1 else tn.concat(taps, axis=-1)
        return self.conv(stacked)


def temporal_max_pool(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Max over a centred frame window; edges replicate, which equals ignoring the padding."""
    t = x.shape[1]
    p = (kernel - 1) // 2
    t_out = (t - 1) // stride + 1
    parts = [x[:, :1]] * p + [x] + [x[:, -1:]] * p
    xp = tn.concat(parts, axis=1) if p else x
    span = stride * (t_out - 1) + 1
    taps = [xp[:, q:q + span:stride] for q in range(kernel)]
    return tn.reduce("max", tn.stack(taps, axis=0), axis=0)


class TemporalModule(Module):
    def __init__(self, in_channels, out_channels, stride, rng, kernel=5, dilations=(1, 2),
                 pool_kernel=3, mode="conv"):
        branches = len(dilations) + 2
        if out_channels % branches:
            raise ConfigurationError(f"{out_channels} output channels not divisible by {branches} branches")
        width = out_channels // branches
        self.stride, self.pool_kernel, self.mode = stride, pool_kernel, mode
        self.in_channels, self.out_channels = in_channels, out_channels
        if mode == "pool":
            if in_channels != out_channels:
                raise ConfigurationError("pooling-only temporal modelling keeps the channel count")
            return
        self.dilated = []
        for d in dilations:
            self.dilated.append(_Branch(
                LinearMap(in_channels, width, rng, bias=False), BatchNorm(width),
                TemporalConv(width, width, kernel, rng, dilation=d, stride=stride, bias=False), BatchNorm(width),
            ))
        self.pool_reduce = LinearMap(in_channels, width, rng, bias=False)
        self.pool_bn1 = BatchNorm(width)
        self.pool_bn2 = BatchNorm(width)
        self.plain = TemporalConv(in_channels, width, 1, rng, stride=stride, bias=False)
        self.plain_bn = BatchNorm(width)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "pool":
            t_out = (x.shape[1] - 1) // self.stride + 1
            pooled = tn.reduce("mean", x, axis=1, keepdims=True)
            return tn.broadcast_to(pooled, (x.shape[0], t_out) + x.shape[2:])
        outs = [b(x) for b in self.dilated]
        h = tn.relu(self.pool_bn1(self.pool_reduce(x)))
        outs.append(self.pool_bn2(temporal_max_pool(h, self.pool_kernel, self.stride)))
        outs.append(self.plain_bn(self.plain(x)))
        return tn.concat(outs, axis=-1)


class _Branch(Module):
    def __init__(self, reduce, bn1, tconv, bn2):
        self.reduce, self.bn1, self.tconv, self.bn2 = reduce, bn1, tconv, bn2

    def forward(self, x):
        return self.bn2(self.tconv(tn.relu(self.bn1(self.reduce(x)))))


class Projection(Module):
    """1x1 map with optional frame stride, followed by normalization."""

    def __init__(self, in_channels, out_channels, rng, stride=1):
        self.conv = TemporalConv(in_channels, out_channels, 1, rng, stride=stride, bias=False)
        self.bn = BatchNorm(out_channels)

    def forward(self, x):
        return self.bn(self.conv(x))


def make_gc(config: ModelConfig, in_channels: int, out_channels: int, topology: np.ndarray, rng):
    kind = config.gc
    if kind == "ctrgc":
        return CtrGcLayer(in_channels, out_channels, topology, rng, r=config.r, corr_fn=config.corr_fn,
                          sigma=config.sigma, alpha=config.alpha_init, use_shared=config.use_shared,
                          use_refinement=config.use_refinement)
    if kind == "stgc":
        return StGcLayer(in_channels, out_channels, topology, rng)
    if kind == "agc":
        return AgcLayer(in_channels, out_channels, topology, rng, r=config.agc_r)
    if kind == "dcgc":
        return DcGcLayer(in_channels, out_channels, topology, rng, groups=config.dcgc_groups)
    if kind == "dcgc_star":
        return DcGcLayer(in_channels, out_channels, topology, rng, groups=in_channels, side="input")
    raise ConfigurationError(f"unknown graph convolution {kind!r}")


class SpatialModule(Module):
    def __init__(self, config: ModelConfig, in_channels: int, out_channels: int, partitions, rng):
        self.gcs = [make_gc(config, in_channels, out_channels, partitions[k % len(partitions)], rng)
                    for k in range(config.gcs_per_block)]
        self.bn = BatchNorm(out_channels)
        self.down = None if in_channels == out_channels else Projection(in_channels, out_channels, rng)

    def pre_activation(self, x: Tensor) -> Tensor:
        y = self.gcs[0](x)
        for gc in self.gcs[1:]:
            y = y + gc(x)
        return y

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.pre_activation(x))
        return tn.relu(y + (x if self.down is None else self.down(x)))


class BasicBlock(Module):
    def __init__(self, config: ModelConfig, in_channels: int, out_channels: int, stride: int, partitions, rng):
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.spatial = SpatialModule(config, in_channels, out_channels, partitions, rng)
        self.temporal = TemporalModule(out_channels, out_channels, stride, rng, kernel=config.temporal_kernel,
                                       dilations=config.dilations, pool_kernel=config.pool_kernel,
                                       mode=config.temporal_mode)
        identity = in_channels == out_channels and stride == 1
        self.residual = None if identity else Projection(in_channels, out_channels, rng, stride=stride)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise DimensionError(f"block expects {self.in_channels} channels, got {x.shape[-1]}")
        y = self.temporal(self.spatial(x))
        return tn.relu(y + (x if self.residual is None else self.residual(x)))


class Model(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, graph: Optional[SkeletonGraph] = None):
        config.validate()
        self.config = config
        graph = build_graph(config.graph) if graph is None else graph
        self.num_joints = graph.num_joints
        rng = np.random.default_rng(seed)
        partitions = adjacency_set(graph).stack()
        self.blocks = []
        c_in = config.in_channels
        for c_out, stride in zip(config.channels, config.strides):
            self.blocks.append(BasicBlock(config, c_in, c_out, stride, partitions, rng))
            c_in = c_out
        self.fc = LinearMap(c_in, config.num_classes, rng, std=np.sqrt(2.0 / config.num_classes))

    def features(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, x) -> Tensor:
        return model_forward(self, x)


def build_model(config: ModelConfig, seed: int = 0, graph: Optional[SkeletonGraph] = None) -> Model:
    """Deterministic construction; ``graph`` overrides the named graph of ``config``."""
    return Model(config, seed, graph)


def stack_batch(batch) -> np.ndarray:
    if isinstance(batch, Tensor):
        return batch.data
    if isinstance(batch, np.ndarray):
        return batch
    return np.stack([s.data if isinstance(s, SkeletonSequence) else np.asarray(s) for s in batch])


def model_forward(model: Model, batch) -> Tensor:
    """Logits ``[B, num_classes]`` for a batch ``[B, M, T, N, C]`` or list of sequences.

    Persons run through the blocks independently; their pooled features are averaged.
    """
    x = stack_batch(batch)
    if x.ndim != 5 or x.shape[3] != model.num_joints or x.shape[4] != model.config.in_channels:
        raise DimensionError(
            f"batch must be [B, M, T, {model.num_joints}, {model.config.in_channels}], got {x.shape}"
        )
    b, m, t, n, c = x.shape
    h = model.features(Tensor(x.reshape(b * m, t, n, c)))
    pooled = tn.reduce("mean", h, axis=(1, 2))
    pooled = tn.reduce("mean", tn.reshape(pooled, (b, m, -1)), axis=1)
    return model.fc(pooled)


# -- counting ------------------------------------------------------------------

@dataclass
class ParamCount:
    total: int
    per_block: Dict[str, int]
    per_role: Dict[str, int]

    def table(self) -> List[str]:
        lines = [f"{name:<12s} {count:>10d}" for name, count in self.per_block.items()]
        lines += [f"role:{role:<7s} {count:>10d}" for role, count in sorted(self.per_role.items())]
        lines.append(f"{'total':<12s} {self.total:>10d}")
        return lines


def count_params(model: Module) -> ParamCount:
    per_block: Dict[str, int] = {}
    per_role: Dict[str, int] = {}
    total = 0
    for path, p in model.named_parameters():
        group = ".".join(path.split(".")[:2]) if path.startswith("blocks.") else path.split(".")[0]
        per_block[group] = per_block.get(group, 0) + p.size
        role = parameter_role(path)
        per_role[role] = per_role.get(role, 0) + p.size
        total += p.size
    return ParamCount(total, per_block, per_role)


@dataclass
class FlopCount:
    """Multiply-accumulates and other elementwise operations."""

    macs: int = 0
    other: int = 0

    def __add__(self, o):
        return FlopCount(self.macs + o.macs, self.other + o.other)

    def __mul__(self, k: int):
        return FlopCount(self.macs * k, self.other * k)

    def flops(self, mac_cost: int) -> int:
        return mac_cost * self.macs + self.other


def matmul_flops(m: int, k: int, n: int, mac_cost: int = 2) -> int:
    return mac_cost * m * k * n


def _linear_cost(rows, lin: LinearMap) -> FlopCount:
    bias = rows * lin.out_channels if lin.bias is not None else 0
    return FlopCount(rows * lin.in_channels * lin.out_channels, bias)


def _bn_cost(elements) -> FlopCount:
    return FlopCount(0, 2 * elements)


def _gc_cost(gc, b, t, n) -> FlopCount:
    cin, cout = gc.in_channels, gc.out_channels
    cost = _linear_cost(b * t * n, gc.transform)
    if isinstance(gc, CtrGcLayer):
        if gc.psi is not None:
            cr = gc.reduced
            cost += _linear_cost(b * t * n, gc.psi) + _linear_cost(b * t * n, gc.phi)
            cost += FlopCount(0, 2 * b * t * n * cr)                  # temporal pooling
            pairs = b * n * n
            if gc.mlp:
                cost += _linear_cost(pairs, gc.mlp[0]) + _linear_cost(pairs, gc.mlp[1])
                cost += FlopCount(0, pairs * cr)
            else:
                cost += FlopCount(0, 2 * pairs * cr)                  # combine + activation
            cost += _linear_cost(pairs, gc.xi)
            cost += FlopCount(0, pairs * cout * (2 if gc.A is not None else 1))
        cost += FlopCount(b * cout * n * n * t, 0)                     # channel-wise aggregation
    elif isinstance(gc, StGcLayer):
        cost += FlopCount(b * t * n * n * cout, 0)
    elif isinstance(gc, AgcLayer):
        e = gc.theta.out_channels
        cost += FlopCount(0, b * t * n * cin)
        cost += _linear_cost(b * n, gc.theta) + _linear_cost(b * n, gc.phi_att)
        cost += FlopCount(b * n * n * e, 4 * b * n * n)
        cost += FlopCount(b * t * n * n * cout, 0)
    elif isinstance(gc, DcGcLayer):
        width = cout if gc.side == "output" else cin
        cost += FlopCount(b * t * n * n * width, 0)
    return cost


def _tconv_cost(tc: TemporalConv, b, t, n) -> Tuple[FlopCount, int]:
    t_out = tc.out_frames(t)
    return _linear_cost(b * t_out * n, tc.conv), t_out


def _block_cost(block: BasicBlock, b, t, n) -> Tuple[FlopCount, int]:
    sp = block.spatial
    cout = block.out_channels
    cost = FlopCount()
    for gc in sp.gcs:
        cost += _gc_cost(gc, b, t, n)
    cost += FlopCount(0, (len(sp.gcs) - 1) * b * t * n * cout)
    cost += _bn_cost(b * t * n * cout)
    if sp.down is not None:
        down, _ = _tconv_cost(sp.down.conv, b, t, n)
        cost += down + _bn_cost(b * t * n * cout)
    cost += FlopCount(0, 2 * b * t * n * cout)                         # residual add + relu
    tm = block.temporal
    t_out = (t - 1) // tm.stride + 1
    if tm.mode == "pool":
        cost += FlopCount(0, b * t * n * cout)
    else:
        for br in tm.dilated:
            w = br.reduce.out_channels
            cost += _linear_cost(b * t * n, br.reduce) + _bn_cost(b * t * n * w) + FlopCount(0, b * t * n * w)
            tc, _ = _tconv_cost(br.tconv, b, t, n)
            cost += tc + _bn_cost(b * t_out * n * w)
        w = tm.pool_reduce.out_channels
        cost += _linear_cost(b * t * n, tm.pool_reduce) + _bn_cost(b * t * n * w) + FlopCount(0, b * t * n * w)
        cost += FlopCount(0, b * t_out * n * w * tm.pool_kernel) + _bn_cost(b * t_out * n * w)
        plain, _ = _tconv_cost(tm.plain, b, t, n)
        cost += plain + _bn_cost(b * t_out * n * tm.plain.conv.out_channels)
    if block.residual is not None:
        res, _ = _tconv_cost(block.residual.conv, b, t, n)
        cost += res + _bn_cost(b * t_out * n * cout)
    cost += FlopCount(0, 2 * b * t_out * n * cout)
    return cost, t_out


@dataclass
class FlopReport:
    frames: int
    joints: int
    persons: int
    per_person: FlopCount
    head: FlopCount
    per_block: List[FlopCount] = field(default_factory=list)

    @property
    def per_sample(self) -> FlopCount:
        return self.per_person * self.persons + self.head

    def total(self, mac_cost: int = 1, scope: str = "sample") -> int:
        if scope == "sample":
            return self.per_sample.flops(mac_cost)
        return (self.per_person + self.head).flops(mac_cost)

    def lines(self) -> List[str]:
        out = [f"input T={self.frames} N={self.joints} M={self.persons}"]
        for i, c in enumerate(self.per_block):
            out.append(f"block{i + 1:<3d} macs={c.macs} other={c.other}")
        out.append(f"head     macs={self.head.macs} other={self.head.other}")
        for scope in ("person", "sample"):
            for cost in (1, 2):
                out.append(f"flops scope={scope} mac={cost} value={self.total(cost, scope)}")
        return out


def count_flops(model: Model, frames: Optional[int] = None, joints: Optional[int] = None,
                persons: Optional[int] = None) -> FlopReport:
    """Analytic operation count for one forward pass.

    ``macs`` counts every multiply-accumulate of the matrix products the
    forward pass actually runs. ``other`` counts one per element for bias adds,
    activations, residual adds and pooling windows, and two per element for
    normalization.
    """
    cfg = model.config
    t = cfg.frames if frames is None else frames
    n = model.num_joints if joints is None else joints
    m = cfg.num_persons if persons is None else persons
    per_block = []
    total = FlopCount()
    for block in model.blocks:
        cost, t = _block_cost(block, 1, t, n)
        per_block.append(cost)
        total += cost
    c = model.blocks[-1].out_channels
    backbone_pool = FlopCount(0, t * n * c)
    head = FlopCount(0, m * c) + _linear_cost(1, model.fc)
    return FlopReport(frames or cfg.frames, n, m, total + backbone_pool, head, per_block)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"CTRC"
CHECKPOINT_VERSION = 1


def _entries(model: Module):
    return list(model.named_tensors())


def encode_checkpoint(model: Model) -> bytes:
    entries = _entries(model)
    out = [CHECKPOINT_MAGIC, struct.pack("<IQI", CHECKPOINT_VERSION, model.config.hash64(), len(entries))]
    for name, t in entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.data.astype("<f4").tobytes(order="C"))
    return b"".join(out)


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(model))


def decode_checkpoint(blob: bytes, config: ModelConfig) -> Model:
    def need(offset, size, what):
        if offset + size > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset)

    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected 'CTRC'", 0)
    need(4, 16, "header")
    version, chash, count = struct.unpack_from("<IQI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if chash != config.hash64():
        raise FormatError("config hash mismatch: checkpoint was written for a different model config", 8)
    model = build_model(config)
    expected = dict(_entries(model))
    offset = 20
    seen = set()
    for _ in range(count):
        need(offset, 2, "entry name length")
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        need(offset, nlen, "entry name")
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        need(offset, 1, f"rank of {name}")
        rank = blob[offset]
        offset += 1
        need(offset, 4 * rank, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        need(offset, 4 * size, f"payload of {name}")
        if name not in expected:
            raise FormatError(f"unexpected parameter entry {name!r}", offset)
        target = expected[name]
        if tuple(dims) != target.shape:
            raise FormatError(f"parameter {name!r} has shape {dims}, model expects {target.shape}", offset)
        target.data[...] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += 4 * size
        seen.add(name)
    missing = [k for k in expected if k not in seen]
    if missing:
        raise FormatError(f"checkpoint is missing parameter {missing[0]!r}", offset)
    if offset != len(blob):
        raise FormatError("trailing bytes after last entry", offset)
    return model


def load_checkpoint(path, config: ModelConfig) -> Model:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), config)


def round_to_storage(model: Module) -> None:
    """Round every tensor to the float32 values a checkpoint stores."""
    for _, t in model.named_tensors():
        t.data[...] = t.data.astype(np.float32)


# -- topology dump -------------------------------------------------------------

def block_inputs(model: Model, x: np.ndarray) -> List[Tensor]:
    """Input of every block for persons ``[M, T, N, C]`` of one sample.

    Runs in evaluation mode so normalization statistics are left untouched.
    """
    h = Tensor(x)
    inputs = []
    was_training = model.training
    model.eval()
    try:
        with tn.no_grad():
            for block in model.blocks:
                inputs.append(h)
                h = block(h)
    finally:
        model.train(was_training)
    return inputs


def dump_topologies(model: Model, sample, blocks: Optional[Sequence[int]] = None,
                    channels: Sequence[int] = (0,), person: int = 0) -> str:
    """Shared topologies and refined channel slices as plain numeric text.

    ``blocks`` are 1-based.  ``R`` slices are for one person of ``sample``.
    Header lines read ``block=<b> branch=<k> kind=A|R channel=<c>``; ``A``
    stanzas carry ``channel=-1``.
    """
    if model.config.gc != "ctrgc":
        raise ConfigurationError("topology dumps need a CTR-GC model")
    x = sample.data if isinstance(sample, SkeletonSequence) else np.asarray(sample)
    blocks = list(range(1, model.config.num_blocks + 1)) if blocks is None else list(blocks)
    for b in blocks:
        if not 1 <= b <= model.config.num_blocks:
            raise IndexError(f"block {b} outside 1..{model.config.num_blocks}")
    inputs = block_inputs(model, x)
    lines = []
    for b in blocks:
        block = model.blocks[b - 1]
        for c in channels:
            if not 0 <= c < block.out_channels:
                raise IndexError(f"channel {c} outside 0..{block.out_channels - 1} for block {b}")
        for k, gc in enumerate(block.spatial.gcs):
            if gc.A is not None:
                lines.append(f"block={b} branch={k} kind=A channel=-1")
                lines.extend(_matrix_lines(gc.A.data))
            with tn.no_grad():
                _, r = ctr_gc_forward(gc, inputs[b - 1], return_topology=True)
            for c in channels:
                lines.append(f"block={b} branch={k} kind=R channel={c}")
                lines.extend(_matrix_lines(r.data[person, :, :, c]))
    return "\n".join(lines) + "\n"


def _matrix_lines(a: np.ndarray) -> List[str]:
    return [" ".join(f"{v:.17g}" for v in row) for row in a]


def parse_topology_dump(text: str) -> List[Tuple[Dict[str, str], np.ndarray]]:
    stanzas, header, rows = [], None, []
    for line in text.splitlines():
        if line.startswith("block="):
            if header is not None:
                stanzas.append((header, np.array(rows)))
            header = dict(item.split("=", 1) for item in line.split())
            rows = []
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    if header is not None:
        stanzas.append((header, np.array(rows)))
    return stanzas
