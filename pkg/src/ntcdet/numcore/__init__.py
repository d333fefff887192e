from .core import (
    MHAParams,
    ShapeError,
    Tape,
    Tensor,
    add,
    attention_over_sets,
    avg_pool,
    bce_with_logits,
    bmm,
    concat,
    conv2d,
    cross_entropy,
    default_dtype,
    grad_enabled,
    grid_sample,
    init_mha_params,
    linear,
    matmul,
    mean,
    mul,
    mul_scalar,
    multi_head_attention,
    narrow,
    neg,
    permute,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    smooth_l1,
    softmax,
    stack,
    sub,
    sum_op,
    take,
)
from .gradcheck import gradient_check
from .optim import AdamW

__all__ = [
    "AdamW",
    "MHAParams",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "attention_over_sets",
    "avg_pool",
    "bce_with_logits",
    "bmm",
    "concat",
    "conv2d",
    "cross_entropy",
    "default_dtype",
    "grad_enabled",
    "gradient_check",
    "grid_sample",
    "init_mha_params",
    "linear",
    "matmul",
    "mean",
    "mul",
    "mul_scalar",
    "multi_head_attention",
    "narrow",
    "neg",
    "permute",
    "precision",
    "relu",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "smooth_l1",
    "softmax",
    "stack",
    "sub",
    "sum_op",
    "take",
]
