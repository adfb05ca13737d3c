"""Tensor algebra with reverse-mode autodiff, Adam, and PCA."""
from .functional import (
    check_stochastic,
    cosine_similarity,
    cross_entropy,
    kl_div,
    kl_div_logits,
    layer_norm,
    log_softmax,
    softmax,
)
from .module import Linear, LayerNorm, Module, Parameter, normal, ones, xavier_uniform, zeros
from .optim import Adam, AdamState, adam_step
from .pca import PCAResult, jacobi_eigh, pca, pca_reduce
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    default_dtype,
    exp,
    gelu,
    get_default_dtype,
    is_grad_enabled,
    log,
    matmul,
    no_grad,
    relu,
    set_default_dtype,
    sigmoid,
    split,
    sqrt,
    stack,
    tanh,
    where,
)

__all__ = [
    "Adam", "AdamState", "Linear", "LayerNorm", "Module", "PCAResult", "Parameter", "Tensor",
    "adam_step", "as_tensor", "check_stochastic", "concat", "cosine_similarity", "cross_entropy",
    "default_dtype", "exp", "gelu", "get_default_dtype", "is_grad_enabled", "jacobi_eigh",
    "kl_div", "kl_div_logits", "layer_norm", "log", "log_softmax", "matmul", "no_grad", "normal",
    "ones", "pca", "pca_reduce", "relu", "set_default_dtype", "sigmoid", "softmax", "split",
    "sqrt", "stack", "tanh", "where", "xavier_uniform", "zeros",
]
