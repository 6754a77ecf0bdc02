"""Differentiable layer toolkit: float64 tensors with reverse-mode autodiff,
the standard 3D-CNN/attention layer set, finite-difference gradient
checking, and checkpoint IO."""

from .checkpoint import load_checkpoint, save_checkpoint, state_hash
from .gradcheck import grad_check
from .layers import (
    Affine,
    BatchNorm3d,
    Conv3d,
    Dropout,
    Module,
    MultiHeadAttention,
)
from .tensor import (
    Tensor,
    affine,
    as_tensor,
    binary_cross_entropy,
    concat,
    conv3d,
    gap,
    leaky_relu,
    matmul,
    maxpool3d,
    multi_head_attention,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
    transpose,
)

__all__ = [
    "Affine",
    "BatchNorm3d",
    "Conv3d",
    "Dropout",
    "Module",
    "MultiHeadAttention",
    "Tensor",
    "affine",
    "as_tensor",
    "binary_cross_entropy",
    "concat",
    "conv3d",
    "gap",
    "grad_check",
    "leaky_relu",
    "load_checkpoint",
    "matmul",
    "maxpool3d",
    "multi_head_attention",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "state_hash",
    "tanh",
    "transpose",
]
