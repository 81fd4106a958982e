from .tensor import (
    Function,
    Tape,
    Tensor,
    as_tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
    reverse_backward,
)
from .functional import (
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    mean,
    reshape,
    softmax,
    tensor_matmul,
    transpose,
)


__all__ = [
    "Function",
    "Tape",
    "Tensor",
    "as_tensor",
    "concat",
    "default_dtype",
    "dropout",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "matmul",
    "mean",
    "no_grad",
    "precision",
    "reshape",
    "reverse_backward",
    "softmax",
    "tensor_matmul",
    "transpose",
]
