from .core import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeNode,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    broadcast_to,
    check_finite,
    clamp,
    concat,
    conv2d,
    conv2d_direct,
    default_dtype,
    depthwise_conv2d,
    forward_op,
    gelu,
    get_tape,
    layer_norm,
    linear_map,
    matmul,
    mean,
    mul,
    no_grad,
    op_kinds,
    pixel_shuffle,
    pixel_unshuffle,
    precision,
    relu,
    reshape,
    scale,
    set_default_dtype,
    sigmoid,
    sub,
    sum_,
    transpose,
)
from .params import Param, ParamStore, grad_check
from .rng import Rng, rand_normal, seeded_rng
