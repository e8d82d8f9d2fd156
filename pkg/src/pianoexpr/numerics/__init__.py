"""Dense tensors with reverse-mode autodiff, transformer layers and optimizers."""

from .nn import encoder_layer, feed_forward, linear, multi_head_self_attention, xavier_uniform
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    div,
    exp,
    layer_norm,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scaled_sigmoid,
    scaled_tanh,
    sigmoid,
    softmax,
    sub,
    tabs,
    tanh,
    transpose,
    tsum,
)
