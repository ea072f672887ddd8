"""Cross-modal person re-identification on synthetic paired data.

Numpy-backed autodiff, a quadruple-stream embedding model with multi-scale
attention links, center-based cross-modal losses, retrieval metrics, and a
CLI covering data generation, training, evaluation, gradient checking, and
the attention-link sweep.
"""

from ._kernels import BACKEND_NAME
from .errors import (
    ConfigError, DataError, DivergenceError, MscmError, ShapeError, VersionError,
)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME", "ConfigError", "DataError", "DivergenceError",
    "MscmError", "ShapeError", "Tensor", "VersionError", "no_grad",
    "__version__",
]
