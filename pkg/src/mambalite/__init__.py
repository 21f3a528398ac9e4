"""MambaLiteUNet: a lightweight Mamba/attention U-Net for binary lesion segmentation."""

from .tensor import Module, NonFiniteError, Parameter, Tensor, no_grad, precision
from .net import ModelConfig, build_model, count_params, estimate_flops, forward_infer

__version__ = "0.1.0"

__all__ = [
    "Module", "NonFiniteError", "Parameter", "Tensor", "no_grad", "precision",
    "ModelConfig", "build_model", "count_params", "estimate_flops", "forward_infer",
]
