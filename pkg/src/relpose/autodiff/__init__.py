"""Minimal reverse-mode autodiff on numpy arrays."""

from relpose.autodiff.optim import Adam, AdamState, adam_step, step_lr
from relpose.autodiff.tensor import (
    Tensor,
    add,
    add_scalar,
    as_tensor,
    concat,
    conv2d,
    div,
    exp,
    expand,
    gather,
    index_select,
    l1_norm,
    l2_norm,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scalar_mul,
    softmax,
    sub,
    sum,
    trace_branches,
    transpose,
)
