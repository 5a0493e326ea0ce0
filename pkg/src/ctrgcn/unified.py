"""Generalized weights ``E^k_ij`` and the constraint audit.

Every graph convolution here can be written ``z^k_i = sum_j x^k_j E^k_ij``
(plus a bias term).  This module rebuilds ``E^k_ij`` from a layer's raw
parameters with plain numpy, never touching the tensor engine, so that
:func:`evaluate_via_generalized` is an independent route to each layer's
output.  :func:`audit_constraints` then measures the five structural
constraints across samples ``k`` and neighbours ``j`` for a fixed joint ``i``.

Dynamic convolution (one free weight per ``k, j``) is the unconstrained
reference: no constraint holds for it, so it needs no code.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError
from .graph_conv import (
    AgcLayer,
    CtrGcLayer,
    DcGcLayer,
    Module,
    StGcLayer,
    ctr_gc_forward,
    dc_gc_forward,
)

EQUALITY_TOL = 1e-9
PROPORTIONAL_TOL = 1e-6
FAIL_TOL = 1e-3

# tightest holding constraint per axis, as tabulated for each family
EXPECTED_PATTERN = {
    "stgc": {"sample": 1, "neighbor": 2},
    "agc": {"sample": 3, "neighbor": 2},
    "dcgc": {"sample": 1, "neighbor": 4},
    "ctrgc": {"sample": 5, "neighbor": 4},
}


@dataclass
class GeneralizedWeight:
    k: int
    i: int
    j: int
    E: np.ndarray                       # [C, C']
    offset: Optional[np.ndarray] = None  # bias contribution of this pair, [C']


def _np(t):
    return None if t is None else t.data


def _affine(x, linear):
    out = x @ linear.weight.data
    if linear.bias is not None:
        out = out + linear.bias.data
    return out


def _act(kind, v):
    if kind == "tanh":
        return np.tanh(v)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-v))
    if kind == "relu":
        return np.maximum(v, 0.0)
    raise ConfigurationError(f"unknown activation {kind!r}")


def ctr_topology(layer: CtrGcLayer, sample: np.ndarray) -> np.ndarray:
    """``r_ij`` for one sample ``[T, N, C]`` by explicit pair loops, ``[N, N, C']``."""
    n = sample.shape[1]
    cout = layer.out_channels
    if layer.psi is None:
        return np.repeat(layer.A.data[:, :, None], cout, axis=2)
    xbar = sample.mean(axis=0)
    psi = _affine(xbar, layer.psi)
    phi = _affine(xbar, layer.phi)
    q = np.empty((n, n, cout))
    for i in range(n):
        for j in range(n):
            if layer.corr_fn == "M1":
                raw = _act(layer.sigma, psi[i] - phi[j])
            elif layer.corr_fn == "M1plus":
                raw = _act(layer.sigma, psi[i] + phi[j])
            else:
                pair = np.concatenate([psi[i], phi[j]])
                raw = _affine(_act(layer.sigma, _affine(pair, layer.mlp[0])), layer.mlp[1])
            q[i, j] = _affine(raw, layer.xi)
    alpha = float(layer.alpha.data)
    if layer.A is None:
        return alpha * q
    return layer.A.data[:, :, None] + alpha * q


def agc_topology(layer: AgcLayer, sample: np.ndarray) -> np.ndarray:
    xbar = sample.mean(axis=0)
    scores = _affine(xbar, layer.theta) @ _affine(xbar, layer.phi_att).T
    scores = np.exp(scores - scores.max(axis=1, keepdims=True))
    return layer.A.data + scores / scores.sum(axis=1, keepdims=True)


def variant_of(layer: Module) -> str:
    if isinstance(layer, CtrGcLayer):
        return "ctrgc"
    if isinstance(layer, AgcLayer):
        return "agc"
    if isinstance(layer, StGcLayer):
        return "stgc"
    if isinstance(layer, DcGcLayer):
        return "dcgc" if layer.side == "output" else "dcgc_input"
    raise ConfigurationError(f"no generalized form for {type(layer).__name__}")


def _pair_coefficients(layer: Module, sample: np.ndarray) -> np.ndarray:
    """Coefficient tensor ``[N, N, width]`` scaling ``W`` for one sample.

    ``width`` is 1 for topology-shared families, ``C'`` for column scaling,
    and ``C`` for the input-side grouped convolution (row scaling).
    """
    kind = variant_of(layer)
    if kind == "stgc":
        return layer.A.data[:, :, None]
    if kind == "agc":
        return agc_topology(layer, sample)[:, :, None]
    if kind in ("dcgc", "dcgc_input"):
        return layer.channel_topology()
    return ctr_topology(layer, sample)


def generalized_weight(layer: Module, samples: np.ndarray, k: int, i: int, j: int) -> GeneralizedWeight:
    """Exact ``E^k_ij`` for sample ``k`` of ``samples`` (``[K, T, N, C]``)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 4 or samples.shape[-1] != layer.in_channels:
        raise DimensionError(f"samples must be [K, T, N, {layer.in_channels}], got {samples.shape}")
    coeff = _pair_coefficients(layer, samples[k])[i, j]
    return _weight_from_coefficients(layer, coeff, k, i, j)


def _weight_from_coefficients(layer, coeff, k, i, j) -> GeneralizedWeight:
    w = layer.transform.weight.data
    b = _np(layer.transform.bias)
    if variant_of(layer) == "dcgc_input":
        return GeneralizedWeight(k, i, j, coeff[:, None] * w, None)
    e = w * coeff[None, :]
    offset = None if b is None else b * coeff
    return GeneralizedWeight(k, i, j, e, offset)


def generalized_weights(layer: Module, sample: np.ndarray, k: int = 0) -> List[List[GeneralizedWeight]]:
    """All ``E^k_ij`` for one sample ``[T, N, C]``, indexed ``[i][j]``."""
    coeff = _pair_coefficients(layer, sample)
    n = coeff.shape[0]
    return [[_weight_from_coefficients(layer, coeff[i, j], k, i, j) for j in range(n)] for i in range(n)]


def evaluate_via_generalized(layer: Module, samples: np.ndarray) -> np.ndarray:
    """``z^k_i = sum_j x^k_j E^k_ij + offset`` for ``samples`` of shape ``[K, T, N, C]``."""
    samples = np.asarray(samples, dtype=np.float64)
    kk, t, n, _ = samples.shape
    out = np.zeros((kk, t, n, layer.out_channels))
    post_bias = _np(layer.transform.bias) if variant_of(layer) == "dcgc_input" else None
    for k in range(kk):
        weights = generalized_weights(layer, samples[k], k)
        for i in range(n):
            acc = np.zeros((t, layer.out_channels))
            for j in range(n):
                gw = weights[i][j]
                acc += samples[k, :, j, :] @ gw.E
                if gw.offset is not None:
                    acc += gw.offset
            if post_bias is not None:
                acc += post_bias
            out[k, :, i, :] = acc
    return out


# -- constraint audit --------------------------------------------------------

@dataclass
class ConstraintReport:
    constraint_id: int
    holds: bool
    worst_violation: float
    tolerance: float
    witnesses: List[Tuple] = field(default_factory=list)
    inconclusive: bool = False

    @property
    def verdict(self) -> str:
        if self.inconclusive:
            return "inconclusive"
        if self.holds:
            return "holds"
        return "fails" if self.worst_violation > FAIL_TOL else "ambiguous"

    def line(self) -> str:
        wit = self.witnesses[0] if self.witnesses else ()
        return (
            f"constraint={self.constraint_id} holds={str(self.holds).lower()} "
            f"verdict={self.verdict} worst_violation={self.worst_violation:.17g} "
            f"witness={','.join(str(v) for v in wit) or '-'}"
        )


def equality_violation(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference relative to the larger max-abs entry (0 for two zero matrices)."""
    scale = max(np.abs(a).max(), np.abs(b).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def proportional_violation(a: np.ndarray, b: np.ndarray) -> float:
    """Distance between unit-Frobenius-normalized, sign-aligned ``a`` and ``b``.

    A zero operand counts as proportional to anything.
    """
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    u, v = a / na, b / nb
    return float(min(np.abs(u - v).max(), np.abs(u + v).max()))


def columnwise_violation(a: np.ndarray, b: np.ndarray) -> Tuple[float, int]:
    worst, col = 0.0, -1
    for c in range(a.shape[1]):
        v = proportional_violation(a[:, c], b[:, c])
        if v > worst:
            worst, col = v, c
    return worst, col


def _report(cid, values, tol, all_zero) -> ConstraintReport:
    worst, witness = 0.0, ()
    for v, w in values:
        if v > worst:
            worst, witness = v, w
    return ConstraintReport(cid, worst <= tol, worst, tol, [witness] if witness else [], all_zero)


def audit_constraints(layer: Module, samples: np.ndarray, i: int = 0,
                      neighbors: Optional[Sequence[int]] = None) -> List[ConstraintReport]:
    """Evaluate constraints 1-5 for joint ``i`` over all sample and neighbour pairs.

    1: ``E^k1_ij == E^k2_ij``; 2: ``E^k_ij1 ~ E^k_ij2``; 3: ``E^k1_ij ~ E^k2_ij``;
    4 and 5: the same proportionalities column by column.
    """
    samples = np.asarray(samples, dtype=np.float64)
    kk, _, n, _ = samples.shape
    neighbors = list(range(n)) if neighbors is None else list(neighbors)
    if kk < 2 or len(neighbors) < 2:
        raise ConfigurationError("the audit needs at least two samples and two neighbours")
    E = {}
    for k in range(kk):
        coeff = _pair_coefficients(layer, samples[k])
        for j in neighbors:
            E[k, j] = _weight_from_coefficients(layer, coeff[i, j], k, i, j).E
    all_zero = all(not np.any(e) for e in E.values())

    sample_pairs = [(k1, k2) for k1 in range(kk) for k2 in range(k1 + 1, kk)]
    neighbor_pairs = [(a, b) for ai, a in enumerate(neighbors) for b in neighbors[ai + 1:]]

    c1, c3, c5, c2, c4 = [], [], [], [], []
    for j in neighbors:
        for k1, k2 in sample_pairs:
            a, b = E[k1, j], E[k2, j]
            c1.append((equality_violation(a, b), (k1, k2, i, j)))
            c3.append((proportional_violation(a, b), (k1, k2, i, j)))
            v, col = columnwise_violation(a, b)
            c5.append((v, (k1, k2, i, j, col)))
    for k in range(kk):
        for j1, j2 in neighbor_pairs:
            a, b = E[k, j1], E[k, j2]
            c2.append((proportional_violation(a, b), (k, i, j1, j2)))
            v, col = columnwise_violation(a, b)
            c4.append((v, (k, i, j1, j2, col)))
    return [
        _report(1, c1, EQUALITY_TOL, all_zero),
        _report(2, c2, PROPORTIONAL_TOL, all_zero),
        _report(3, c3, PROPORTIONAL_TOL, all_zero),
        _report(4, c4, PROPORTIONAL_TOL, all_zero),
        _report(5, c5, PROPORTIONAL_TOL, all_zero),
    ]


def tightest_pattern(reports: Sequence[ConstraintReport]) -> Dict[str, Optional[int]]:
    """Strongest holding constraint on the sample axis (1 > 3 > 5) and the
    neighbour axis (2 > 4); ``None`` when nothing on that axis holds."""
    holds = {r.constraint_id for r in reports if r.verdict == "holds"}
    sample = next((c for c in (1, 3, 5) if c in holds), None)
    neighbor = next((c for c in (2, 4) if c in holds), None)
    return {"sample": sample, "neighbor": neighbor}


def classification_clean(reports: Sequence[ConstraintReport]) -> bool:
    """True when every report is a clear hold or a clear failure."""
    return all(r.verdict in ("holds", "fails") for r in reports)


# -- random instances --------------------------------------------------------

def randomize(layer: Module, rng: np.random.Generator, low: float = -1.0, high: float = 1.0,
              biases: bool = True) -> Module:
    """Overwrite every parameter (and a frozen ST-GC topology) with uniform draws."""
    for path, t in layer.named_tensors():
        if path.endswith("bias") and not biases:
            t.data[...] = 0.0
        else:
            t.data[...] = rng.uniform(low, high, size=t.shape)
    return layer


def random_layer(variant: str, in_channels: int, out_channels: int, num_joints: int,
                 rng: np.random.Generator, r: int = 2, biases: bool = True, **kwargs) -> Module:
    """A generic instance of one family with every parameter uniform in [-1, 1]."""
    a = np.eye(num_joints)
    if variant == "stgc":
        layer = StGcLayer(in_channels, out_channels, a, rng)
    elif variant == "agc":
        layer = AgcLayer(in_channels, out_channels, a, rng, r=r)
    elif variant == "dcgc":
        layer = DcGcLayer(in_channels, out_channels, a, rng, groups=kwargs.get("groups", 2))
    elif variant == "dcgc_star":
        layer = DcGcLayer(in_channels, out_channels, a, rng, groups=out_channels)
    elif variant == "dcgc_input":
        layer = DcGcLayer(in_channels, out_channels, a, rng, groups=in_channels, side="input")
    elif variant == "ctrgc":
        layer = CtrGcLayer(in_channels, out_channels, a, rng, r=r,
                           corr_fn=kwargs.get("corr_fn", "M1"), sigma=kwargs.get("sigma", "tanh"))
    else:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return randomize(layer, rng, biases=biases)


def audit_variant(variant: str, seed: int, num_samples: int = 3, num_joints: int = 5,
                  in_channels: int = 4, out_channels: int = 6, frames: int = 3,
                  **kwargs) -> List[ConstraintReport]:
    """Audit one family on a seeded generic instance."""
    rng = np.random.default_rng(seed)
    layer = random_layer(variant, in_channels, out_channels, num_joints, rng, **kwargs)
    samples = rng.uniform(-1.0, 1.0, size=(num_samples, frames, num_joints, in_channels))
    return audit_constraints(layer, samples, i=0)


# -- equivalence suite -------------------------------------------------------

@dataclass
class EquivalenceReport:
    trials: int
    worst_non_shared: float   # elementwise channel-topology form vs column-scaled form
    worst_ctr: float          # batched channel-wise aggregation vs generalized-weight sum
    dims: List[Tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.worst_non_shared, self.worst_ctr)

    def lines(self) -> List[str]:
        return [
            f"trials={self.trials}",
            f"static_nonshared_max_abs_diff={self.worst_non_shared:.17g}",
            f"ctrgc_max_abs_diff={self.worst_ctr:.17g}",
            f"worst={self.worst:.17g}",
        ]


def equivalence_suite(seed: int, trials: int, biases: bool = False) -> EquivalenceReport:
    """Compare each non-shared family's batched forward with its generalized form."""
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst_dc = worst_ctr = 0.0
    dims = []
    for _ in range(trials):
        n = int(rng.integers(3, 9))
        c = int(rng.integers(2, 9))
        cout = int(rng.integers(2, 9))
        r = int(rng.choice([1, 2]))
        m = int(rng.integers(1, 4))
        t = int(rng.integers(1, 5))
        dims.append((n, c, cout, r))
        x = rng.uniform(-1.0, 1.0, size=(m, t, n, c))
        xt = tn.Tensor(x)

        dc = random_layer("dcgc_star", c, cout, n, rng, biases=biases)
        with tn.no_grad():
            direct = dc_gc_forward(dc, xt).data
        worst_dc = max(worst_dc, float(np.abs(direct - evaluate_via_generalized(dc, x)).max()))

        ctr = random_layer("ctrgc", c, cout, n, rng, r=r, biases=biases)
        with tn.no_grad():
            direct = ctr_gc_forward(ctr, xt).data
        worst_ctr = max(worst_ctr, float(np.abs(direct - evaluate_via_generalized(ctr, x)).max()))
    return EquivalenceReport(trials, worst_dc, worst_ctr, dims)
