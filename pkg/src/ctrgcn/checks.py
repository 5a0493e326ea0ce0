"""Seeded finite-difference checks at three scopes: single ops, one layer, a tiny model."""

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import tensor as tn
from .graph_conv import CtrGcLayer, ctr_gc_forward
from .network import ModelConfig, build_model, model_forward
from .tensor import Tensor
from .training import cross_entropy
from .unified import randomize


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return tn.parameter(rng.uniform(low, high, size=shape))


def op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[], Tensor], List[Tensor]]]:
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    row = _leaf(rng, 1, 4)
    pos = _leaf(rng, 3, 4, low=0.5, high=1.5)
    m, w = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    bias = _leaf(rng, 5)
    x4 = _leaf(rng, 2, 3, 5, 4)
    proj = {}

    def case(name, f, params):
        # a fixed random projection keeps every output element's gradient distinct
        proj[name] = None

        def g():
            out = f()
            if proj[name] is None:
                proj[name] = rng.uniform(-1.0, 1.0, size=out.shape)
            return (out * proj[name]).sum()
        return name, g, params

    return [
        case("add", lambda: a + row, [a, row]),
        case("sub", lambda: a - b, [a, b]),
        case("mul", lambda: a * row, [a, row]),
        case("div", lambda: a / pos, [a, pos]),
        case("power", lambda: tn.power(pos, 1.5), [pos]),
        case("exp", lambda: tn.exp(a), [a]),
        case("log", lambda: tn.log(pos), [pos]),
        case("tanh", lambda: tn.tanh(a), [a]),
        case("sigmoid", lambda: tn.sigmoid(a), [a]),
        case("relu", lambda: tn.relu(a), [a]),
        case("softmax", lambda: tn.softmax(a), [a]),
        case("log_softmax", lambda: tn.log_softmax(a), [a]),
        case("matmul", lambda: tn.matmul(m, w), [m, w]),
        case("linear", lambda: tn.linear(m, w, bias), [m, w, bias]),
        case("sum", lambda: tn.reduce("sum", x4, axis=(1, 2)), [x4]),
        case("mean", lambda: tn.reduce("mean", x4, axis=1), [x4]),
        case("max", lambda: tn.reduce("max", x4, axis=2), [x4]),
        case("transpose", lambda: tn.transpose(x4, (0, 3, 2, 1)), [x4]),
        case("broadcast_to", lambda: tn.broadcast_to(row, (2, 3, 4)), [row]),
        case("getitem", lambda: x4[:, 1:, ::2], [x4]),
        case("pad", lambda: tn.pad(x4, ((0, 0), (2, 2), (0, 0), (0, 0))), [x4]),
        case("concat", lambda: tn.concat([a, b], axis=1), [a, b]),
        case("stack", lambda: tn.stack([a, b], axis=0), [a, b]),
    ]


def op_grad_checks(seed: int, eps: float = 1e-5) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: tn.grad_check(f, params, eps) for name, f, params in op_cases(rng)}


def small_ctr_layer(seed: int, corr_fn: str = "M1") -> Tuple[CtrGcLayer, np.ndarray]:
    """Random M=1, T=2, N=5, C=4, C'=6, r=2 instance with all parameters in [-1, 1]."""
    rng = np.random.default_rng(seed)
    layer = CtrGcLayer(4, 6, np.eye(5), rng, r=2, corr_fn=corr_fn)
    randomize(layer, rng)
    x = rng.uniform(-1.0, 1.0, size=(1, 2, 5, 4))
    return layer, x


def layer_grad_check(seed: int, corr_fn: str = "M1", eps: float = 1e-5) -> float:
    layer, x = small_ctr_layer(seed, corr_fn)
    proj = np.random.default_rng([seed, 1]).uniform(-1.0, 1.0, size=(1, 2, 5, 6))
    return tn.grad_check(lambda: (ctr_gc_forward(layer, Tensor(x)) * proj).sum(), layer.parameters(), eps)


TINY_CONFIG = ModelConfig(graph="toy5", num_classes=3, channels=(8, 16), strides=(1, 2), r=4,
                          num_persons=1, frames=8, alpha_init=0.5)


def model_grad_check(seed: int, eps: float = 1e-5) -> float:
    """End-to-end check of the tiny 2-block model under cross-entropy, training mode."""
    model = build_model(TINY_CONFIG, seed=seed)
    rng = np.random.default_rng([seed, 2])
    x = rng.uniform(-1.0, 1.0, size=(2, 1, TINY_CONFIG.frames, 5, 3))
    labels = [0, 2]
    return tn.grad_check(lambda: cross_entropy(model_forward(model, x), labels), model.parameters(), eps)
