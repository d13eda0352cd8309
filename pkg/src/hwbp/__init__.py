"""Highway backpropagation for deep sequential models.

Layers decompose as ``f(x) = r(x, g(x))`` with a cheap residual Jacobian
``K = dr/dx`` and an expensive block ``g`` reached only through VJPs. The
engine computes gradient estimates that sum every backward path through at
most ``k`` blocks, exact once ``k >= L``, next to exact backprop and the
fixed-point-iteration baseline.
"""

from .engine import (
    Batch,
    BackwardResult,
    Counters,
    GradientEstimate,
    GradientSet,
    ModelGraph,
    Trace,
    compute_gradients,
    exact_backprop,
    fpi,
    highway_bp,
    initial_estimate,
    iterate,
    run_forward,
)
from .errors import (
    CapacityError,
    ContractError,
    DivergenceError,
    HwbpError,
    InputError,
    NumericError,
    ShapeError,
)
from .layers import LayerSpec, LayerTape, ResidualJacobian
from .models import build_model, random_batch
from .oracle import (
    PathSpec,
    brute_force_estimate,
    cosine_similarity,
    finite_diff_gradient,
    norm_profile,
    path_gradient,
)
from .scan import KChain, cumsumprod_par, cumsumprod_seq

__version__ = "0.1.0"
