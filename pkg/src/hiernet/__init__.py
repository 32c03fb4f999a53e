"""Hierarchical growth training of Leaky-ReLU networks.

The compiled kernels are used when available; set ``HIERNET_BACKEND=python``
to force the pure numpy fallback.
"""

from . import _backend
from .errors import (
    AlreadyOptimalError,
    CompositionError,
    ConfigError,
    DegenerateInputError,
    DegenerateSearchError,
    DomainError,
    HiernetError,
    InstabilityError,
    NumericDivergence,
    PartitionError,
    ShapeError,
    SingularSystemError,
)
from .growth import (
    ExtensionResult,
    GrowthConfig,
    adaptive_train,
    exact_line_search_alpha,
    first_layers_modified_data,
    inner_extend,
    joint_alpha_beta,
    partial_final_layers,
    theoretical_alpha,
    wstar_search,
)
from .loss import (
    Diagonal,
    DirectionalDerivative,
    Identity,
    LossSpec,
    TrainingSet,
    alignment,
    loss,
    quadratic_expansion,
    residual,
    response_vector,
)
from .net import (
    Activation,
    Architecture,
    WeightSet,
    direct_sum,
    hat_network,
    param_count,
    realize,
    realize_batch,
    scale_weights,
    split_final_layer,
)
from .optim import FrozenMask, OptimConfig, gradient, is_stalled, train



def backend() -> str:
    """Name of the active kernel backend."""
    return _backend.kernels.NAME

__version__ = "0.1.0"
