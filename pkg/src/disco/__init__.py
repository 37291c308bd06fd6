"""Channel-discriminability losses with a self-contained training stack."""

__version__ = "0.1.0"

from .losses import LabelMatrix, LossConfig, disco_loss, total_loss
from .tensor import Tensor, finite_diff_check, no_grad

__all__ = [
    "__version__",
    "Tensor",
    "no_grad",
    "finite_diff_check",
    "LabelMatrix",
    "LossConfig",
    "disco_loss",
    "total_loss",
]
