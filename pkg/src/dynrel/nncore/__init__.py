"""Minimal reverse-mode autodiff core used by every model in the package."""

from .tensor import (
    Tensor,
    as_tensor,
    precision,
    no_grad,
    default_dtype,
    add,
    mul,
    div,
    power,
    exp,
    log,
    tanh,
    sigmoid,
    elu,
    softmax,
    log_softmax,
    tsum,
    tmean,
    reshape,
    transpose,
    concat,
    take,
    matmul,
    conv1d,
    avg_pool1d,
    upsample_nearest,
    segment_mean,
    grad_of,
)
from .layers import Module, Linear, Conv1d, MLP, GRUCell
from .sample import gumbel_softmax_sample, gumbel_noise
from .optim import Adam
