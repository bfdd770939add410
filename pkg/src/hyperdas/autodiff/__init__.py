from .tensor import (
    ContractError,
    NonFiniteError,
    Tensor,
    add,
    concat,
    cross_entropy,
    embedding,
    gelu,
    get_dtype,
    getitem,
    householder_apply,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    parameter,
    precision,
    relu,
    reshape,
    rms_norm,
    scale,
    softmax,
    split,
    tanh,
    transpose,
    tsum,
    where_gt,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "ContractError", "NonFiniteError", "Tensor", "adam_step", "add",
    "concat", "cross_entropy", "embedding", "gelu", "get_dtype", "getitem", "householder_apply",
    "layer_norm", "log_softmax", "masked_fill", "matmul", "mean", "mul", "neg", "no_grad",
    "parameter", "precision", "relu", "reshape", "rms_norm", "scale", "softmax", "split",
    "tanh", "transpose", "tsum", "where_gt",
]
