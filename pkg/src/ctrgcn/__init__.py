"""Channel-wise topology refinement graph convolutions for skeleton action recognition.

Built on a small numpy-backed reverse-mode autodiff core (``ctrgcn.tensor``).
"""

from .errors import ConfigurationError, ContractError, DimensionError, FormatError
from .graph_conv import AgcLayer, CtrGcLayer, DcGcLayer, StGcLayer, ctr_gc_forward, st_gc_forward
from .network import ModelConfig, build_model, count_flops, count_params, model_forward
from .skeleton import SkeletonSequence, SyntheticSpec, build_graph, synthesize_dataset
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"
