"""EEG conv-transformer classifier and its training/evaluation pipeline."""

__version__ = "0.1.0"

from .model import ConvTransformer, ModelConfig, count_flops
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "ConvTransformer",
    "ModelConfig",
    "Tensor",
    "count_flops",
    "grad_check",
    "no_grad",
    "__version__",
]
