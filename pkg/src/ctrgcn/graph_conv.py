"""Graph convolutions over skeleton feature maps ``[M, T, N, C]``.

Four families share one layout: ``M`` independent samples (or persons),
``T`` frames, ``N`` joints and ``C`` channels on the last axis.

* :class:`StGcLayer`  static topology shared by all channels
* :class:`AgcLayer`   trainable topology plus per-sample attention, shared by channels
* :class:`DcGcLayer`  static, one trainable topology per channel group
* :class:`CtrGcLayer` shared topology refined per sample and per channel
"""

from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

CORRELATIONS = ("M1", "M1plus", "M2")
SIGMAS = ("tanh", "sigmoid", "relu")

_ROLE_BY_NAME = {
    "weight": "weights",
    "bias": "biases",
    "A": "topologies",
    "P": "topologies",
    "alpha": "alpha",
    "gamma": "normalization",
    "beta": "normalization",
}


class Module:
    """Minimal container: tensors held as attributes are parameters (trainable)
    or buffers (not trainable); nested modules and lists of modules recurse."""

    training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            elif isinstance(value, (Tensor, Module)):
                yield name, value

    def named_tensors(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_tensors(path + ".")
            else:
                yield path, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for path, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield path, t

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for path, t in self.named_tensors(prefix):
            if not t.requires_grad:
                yield path, t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter_role(path: str) -> str:
    return _ROLE_BY_NAME.get(path.rsplit(".", 1)[-1], "other")


def freeze(t: Tensor) -> None:
    t.requires_grad = False
    t.grad = None


class LinearMap(Module):
    """Per-site channel map ``x @ weight + bias`` on the last axis."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 bias: bool = True, std: Optional[float] = None):
        if in_channels < 1 or out_channels < 1:
            raise ConfigurationError(f"LinearMap dims must be positive: {in_channels}->{out_channels}")
        std = np.sqrt(2.0 / in_channels) if std is None else std
        self.weight = tn.parameter(rng.normal(0.0, std, size=(in_channels, out_channels)))
        self.bias = tn.parameter(np.zeros(out_channels)) if bias else None

    @property
    def in_channels(self):
        return self.weight.shape[0]

    @property
    def out_channels(self):
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.weight, self.bias)


def reduced_channels(channels: int, r: int) -> int:
    return max(1, channels // r)


def _check_features(x: Tensor, channels: int, joints: Optional[int] = None):
    if x.ndim != 4:
        raise DimensionError(f"features must be [M, T, N, C], got {x.shape}")
    if x.shape[-1] != channels:
        raise DimensionError(f"expected {channels} channels, got {x.shape[-1]}")
    if joints is not None and x.shape[2] != joints:
        raise DimensionError(f"expected {joints} joints, got {x.shape[2]}")


def _check_topology(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"topology must be N x N, got {a.shape}")
    return a


# -- CTR-GC ------------------------------------------------------------------

class CtrGcLayer(Module):
    """Channel-wise topology refinement graph convolution.

    ``R = A + alpha * Q`` where ``Q = xi(M(psi(x_i), phi(x_j)))`` is inferred
    from temporally pooled features.  ``use_shared=False`` drops ``A``;
    ``use_refinement=False`` drops the whole correlation branch.
    """

    def __init__(self, in_channels: int, out_channels: int, topology, rng: np.random.Generator,
                 r: int = 8, corr_fn: str = "M1", sigma: str = "tanh", alpha: float = 0.0,
                 use_shared: bool = True, use_refinement: bool = True):
        if corr_fn not in CORRELATIONS:
            raise ConfigurationError(f"unknown correlation function {corr_fn!r}")
        if sigma not in SIGMAS:
            raise ConfigurationError(f"unknown activation {sigma!r}")
        if not (use_shared or use_refinement):
            raise ConfigurationError("CTR-GC needs the shared topology, the refinement, or both")
        self.corr_fn = corr_fn
        self.sigma = sigma
        self.r = r
        reduced = reduced_channels(in_channels, r)
        self.transform = LinearMap(in_channels, out_channels, rng)
        topology = _check_topology(topology)
        self.A = tn.parameter(topology) if use_shared else None
        self.num_joints = topology.shape[0]
        self.psi = self.phi = self.xi = self.alpha = None
        self.mlp = []
        if use_refinement:
            self.psi = LinearMap(in_channels, reduced, rng)
            self.phi = LinearMap(in_channels, reduced, rng)
            if corr_fn == "M2":
                self.mlp = [LinearMap(2 * reduced, reduced, rng), LinearMap(reduced, reduced, rng)]
            self.xi = LinearMap(reduced, out_channels, rng)
            self.alpha = tn.parameter(np.array(float(alpha)))

    @property
    def in_channels(self):
        return self.transform.in_channels

    @property
    def out_channels(self):
        return self.transform.out_channels

    @property
    def reduced(self):
        return self.psi.out_channels if self.psi is not None else 0

    def forward(self, x: Tensor) -> Tensor:
        return ctr_gc_forward(self, x)


def feature_transform(layer, x: Tensor) -> Tensor:
    _check_features(x, layer.transform.in_channels)
    return layer.transform(x)


def temporal_context(x: Tensor) -> Tensor:
    """Mean over the frame axis: ``[M, T, N, C] -> [M, N, C]``."""
    if x.ndim != 4:
        raise DimensionError(f"features must be [M, T, N, C], got {x.shape}")
    return tn.reduce("mean", x, axis=1)


def _pairwise(layer: CtrGcLayer, left: Tensor, right: Tensor, corr_fn: Optional[str] = None) -> Tensor:
    """Combine ``left`` (row joint i) with ``right`` (column joint j)."""
    corr_fn = corr_fn or layer.corr_fn
    m, n, c = left.shape
    li = tn.reshape(left, (m, n, 1, c))
    rj = tn.reshape(right, (m, 1, n, c))
    if corr_fn == "M1":
        return tn.activation(layer.sigma, li - rj)
    if corr_fn == "M1plus":
        return tn.activation(layer.sigma, li + rj)
    if not layer.mlp:
        raise ConfigurationError("M2 correlation needs the two-layer perceptron")
    pair = tn.concat([tn.broadcast_to(li, (m, n, n, c)), tn.broadcast_to(rj, (m, n, n, c))], axis=-1)
    hidden = tn.activation(layer.sigma, layer.mlp[0](pair))
    return layer.mlp[1](hidden)


def _embed(layer: CtrGcLayer, xbar: Tensor):
    if xbar.ndim != 3 or xbar.shape[-1] != layer.in_channels:
        raise DimensionError(f"pooled features must be [M, N, {layer.in_channels}], got {xbar.shape}")
    if layer.psi is None:
        raise ConfigurationError("layer was built without the refinement branch")
    return layer.psi(xbar), layer.phi(xbar)


def correlation_m1(layer: CtrGcLayer, xbar: Tensor) -> Tensor:
    """``sigma(psi(x_i) - phi(x_j))`` for every joint pair, ``[M, N, N, Cr]``."""
    return _pairwise(layer, *_embed(layer, xbar), corr_fn="M1")


def correlation_m1plus(layer: CtrGcLayer, xbar: Tensor) -> Tensor:
    return _pairwise(layer, *_embed(layer, xbar), corr_fn="M1plus")


def correlation_m2(layer: CtrGcLayer, xbar: Tensor) -> Tensor:
    """Two-layer perceptron on ``psi(x_i) || phi(x_j)``."""
    return _pairwise(layer, *_embed(layer, xbar), corr_fn="M2")


def correlations(layer: CtrGcLayer, xbar: Tensor) -> Tensor:
    return _pairwise(layer, *_embed(layer, xbar))


def channel_correlations(layer: CtrGcLayer, raw: Tensor) -> Tensor:
    """Raise ``[M, N, N, Cr]`` correlations to ``[M, N, N, C']`` with ``xi``."""
    if raw.shape[-1] != layer.xi.in_channels:
        raise DimensionError(f"xi expects {layer.xi.in_channels} channels, got {raw.shape[-1]}")
    return layer.xi(raw)


def refine_topology(shared: Tensor, q: Tensor, alpha) -> Tensor:
    """``A + alpha * Q`` with ``A`` broadcast over samples and channels."""
    n = q.shape[1]
    if shared.shape != (n, n) or q.shape[2] != n:
        raise DimensionError(f"topology {shared.shape} does not match correlations {q.shape}")
    return tn.reshape(shared, (n, n, 1)) + alpha * q


def channelwise_aggregate(xt: Tensor, r: Tensor) -> Tensor:
    """``Z[m, t, :, c] = R[m, :, :, c] @ X~[m, t, :, c]`` as one batched product."""
    m, t, n, c = xt.shape
    if r.shape != (m, n, n, c):
        raise DimensionError(f"topologies {r.shape} do not match features {xt.shape}")
    rc = tn.transpose(r, (0, 3, 1, 2))          # [M, C', N, N]
    xc = tn.transpose(xt, (0, 3, 2, 1))         # [M, C', N, T]
    z = tn.batch_matmul(rc, xc)                 # [M, C', N, T]
    return tn.transpose(z, (0, 3, 2, 1))


def refined_topology(layer: CtrGcLayer, x: Tensor) -> Tensor:
    """Per-sample channel-wise topologies ``[M, N, N, C']`` (no frame axis)."""
    m, _, n, _ = x.shape
    if layer.psi is None:
        return tn.broadcast_to(tn.reshape(layer.A, (1, n, n, 1)), (m, n, n, layer.out_channels))
    # psi/phi run on every frame before pooling; both are affine, so this equals
    # embedding the pooled features
    psi = tn.reduce("mean", layer.psi(x), axis=1)
    phi = tn.reduce("mean", layer.phi(x), axis=1)
    q = channel_correlations(layer, _pairwise(layer, psi, phi))
    if layer.A is None:
        return layer.alpha * q
    return refine_topology(layer.A, q, layer.alpha)


def ctr_gc_forward(layer: CtrGcLayer, x: Tensor, return_topology: bool = False):
    _check_features(x, layer.in_channels, layer.num_joints)
    r = refined_topology(layer, x)
    z = channelwise_aggregate(feature_transform(layer, x), r)
    return (z, r) if return_topology else z


# -- competitor families -----------------------------------------------------

class StGcLayer(Module):
    """``Z[m, t] = A @ (X[m, t] W)`` with ``A`` frozen unless ``trainable``."""

    def __init__(self, in_channels: int, out_channels: int, topology, rng: np.random.Generator,
                 trainable: bool = False):
        topology = _check_topology(topology)
        self.transform = LinearMap(in_channels, out_channels, rng)
        self.A = Tensor(topology, requires_grad=trainable)
        self.num_joints = topology.shape[0]

    @property
    def in_channels(self):
        return self.transform.in_channels

    @property
    def out_channels(self):
        return self.transform.out_channels

    def forward(self, x):
        return st_gc_forward(self, x)


def st_gc_forward(layer, x: Tensor) -> Tensor:
    _check_features(x, layer.transform.in_channels, layer.A.shape[0])
    return tn.matmul(layer.A, feature_transform(layer, x))


class AgcLayer(Module):
    """Shared trainable ``A`` plus ``softmax_j(theta(x_i) . phi(x_j))`` per sample."""

    def __init__(self, in_channels: int, out_channels: int, topology, rng: np.random.Generator,
                 r: int = 4):
        topology = _check_topology(topology)
        embed = reduced_channels(in_channels, r)
        self.transform = LinearMap(in_channels, out_channels, rng)
        self.theta = LinearMap(in_channels, embed, rng)
        self.phi_att = LinearMap(in_channels, embed, rng)
        self.A = tn.parameter(topology)
        self.num_joints = topology.shape[0]

    @property
    def in_channels(self):
        return self.transform.in_channels

    @property
    def out_channels(self):
        return self.transform.out_channels

    def forward(self, x):
        return agc_forward(self, x)


def attention_topology(layer: AgcLayer, x: Tensor) -> Tensor:
    """Per-sample topology ``[M, N, N]``."""
    xbar = temporal_context(x)
    theta = layer.theta(xbar)
    phi = layer.phi_att(xbar)
    scores = tn.matmul(theta, tn.transpose(phi, (0, 2, 1)))
    return layer.A + tn.softmax(scores)


def agc_forward(layer: AgcLayer, x: Tensor) -> Tensor:
    _check_features(x, layer.in_channels, layer.num_joints)
    m, _, n, _ = x.shape
    a = tn.reshape(attention_topology(layer, x), (m, 1, n, n))
    return tn.matmul(a, feature_transform(layer, x))


class DcGcLayer(Module):
    """Static topology per channel group.

    ``side="output"`` groups the transformed channels (``G`` divides ``C'``)
    and aggregates after the transform; ``side="input"`` groups the input
    channels (``G`` divides ``C``) and aggregates before it.
    """

    def __init__(self, in_channels: int, out_channels: int, topology, rng: np.random.Generator,
                 groups: int = 16, side: str = "output"):
        topology = _check_topology(topology)
        if side not in ("output", "input"):
            raise ConfigurationError(f"side must be 'output' or 'input', got {side!r}")
        width = out_channels if side == "output" else in_channels
        if groups < 1 or width % groups:
            raise ConfigurationError(f"{groups} groups do not divide {width} {side} channels")
        self.side = side
        self.groups = groups
        self.transform = LinearMap(in_channels, out_channels, rng)
        self.P = tn.parameter(np.repeat(topology[None], groups, axis=0))
        self.num_joints = topology.shape[0]

    @property
    def in_channels(self):
        return self.transform.in_channels

    @property
    def out_channels(self):
        return self.transform.out_channels

    def channel_topology(self) -> np.ndarray:
        """``[N, N, width]`` array holding the topology used by each channel."""
        width = self.out_channels if self.side == "output" else self.in_channels
        group_of = np.arange(width) // (width // self.groups)
        return np.transpose(self.P.data[group_of], (1, 2, 0))

    def forward(self, x):
        return dc_gc_forward(self, x)


def _group_aggregate(p: Tensor, x: Tensor) -> Tensor:
    g = p.shape[0]
    m, t, n, c = x.shape
    xg = tn.transpose(tn.reshape(x, (m, t, n, g, c // g)), (0, 1, 3, 2, 4))   # [M, T, G, N, c/G]
    z = tn.matmul(p, xg)
    return tn.reshape(tn.transpose(z, (0, 1, 3, 2, 4)), (m, t, n, c))


def dc_gc_forward(layer: DcGcLayer, x: Tensor) -> Tensor:
    _check_features(x, layer.in_channels, layer.num_joints)
    if layer.side == "output":
        return _group_aggregate(layer.P, feature_transform(layer, x))
    return layer.transform(_group_aggregate(layer.P, x))


GC_FAMILIES = {
    "ctrgc": CtrGcLayer,
    "stgc": StGcLayer,
    "agc": AgcLayer,
    "dcgc": DcGcLayer,
    "dcgc_star": DcGcLayer,
}
