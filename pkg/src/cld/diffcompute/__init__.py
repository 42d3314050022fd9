"""Minimal reverse-mode differentiable computation on float64 numpy arrays."""
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .distributions import gaussian_log_prob, kl_standard_normal, kl_standard_normal_logvar
from .gradcheck import check_gradients, forward_backward, relative_error
from .layers import (
    apply_conv,
    apply_dense,
    conv2d,
    dense,
    init_conv,
    init_dense,
    init_lstm,
    lstm_cell,
    run_lstm,
    run_lstm_const_input,
    sinusoidal_timestep_embedding,
    unicycle_rollout,
)
from .optim import adam_update
from .params import ParameterStore
from .tensor import (
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    cos,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    sin,
    square,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)
