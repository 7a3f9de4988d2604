"""Small reverse-mode autodiff engine on top of numpy.

Provides exactly the primitives the VQ-VAE, the transformer and the
brain-age regressor need: dense and batched matmul, 3D (transposed)
convolution, normalisation, softmax/cross-entropy, dropout and Adam.
"""

from . import functional
from .config import get_dtype, get_precision, precision, set_precision
from .functional import (
    conv3d,
    conv3d_transpose,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean,
    mse,
    relu,
    reshape,
    softmax,
)
from .kernels import BACKEND
from .optim import Adam, OptimizerState
from .tensor import GradientError, NumericError, ShapeError, Tensor, backward


def parameter(data, name=None) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name)


__all__ = [
    "Adam", "BACKEND", "GradientError", "NumericError", "OptimizerState", "ShapeError",
    "Tensor", "backward", "conv3d", "conv3d_transpose", "cross_entropy", "dropout",
    "embedding", "functional", "gelu", "get_dtype", "get_precision", "layer_norm",
    "linear", "log_softmax", "matmul", "mean", "mse", "parameter", "precision", "relu",
    "reshape", "set_precision", "softmax",
]
