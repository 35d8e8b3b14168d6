"""Numpy tensors with tape-based reverse-mode differentiation."""

from .gradcheck import grad_check, params_grad_check
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    BatchNormState,
    abs,
    add,
    as_tensor,
    batchnorm,
    concat,
    conv2d,
    cosine_similarity,
    cross_entropy,
    deconv2d,
    getitem,
    global_avgpool,
    l2_normalize,
    linear,
    mean,
    mse_frobenius,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    square,
    sub,
    sum,
    watch_kinks,
)
from .tensor import (
    DegenerateInputError,
    DimensionError,
    NonScalarLossError,
    Tape,
    Tensor,
    active_tape,
    backward,
    no_grad,
)
from . import tensorio

__all__ = [name for name in dir() if not name.startswith("_")]
