"""Minimal reverse-mode autodiff substrate (float64 numpy)."""

from .nn import GRU, MLP, CausalConv, Linear, Module, MultiHeadAttention, param
from .ops import (
    causal_mask,
    dilated_causal_conv,
    fft_magnitude,
    gaussian_nll,
    gru_sequence,
    masked_attention,
    sliding_windows,
)
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import (
    Tensor,
    concat,
    exp,
    log,
    logsumexp,
    mean,
    no_grad,
    relu,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    square,
    stack,
    tanh,
    tmax,
    tsum,
)

__all__ = [
    "Adam",
    "AdamState",
    "CausalConv",
    "GRU",
    "Linear",
    "MLP",
    "Module",
    "MultiHeadAttention",
    "Tensor",
    "adam_step",
    "clip_grad_norm",
    "causal_mask",
    "concat",
    "dilated_causal_conv",
    "exp",
    "fft_magnitude",
    "gaussian_nll",
    "gru_sequence",
    "log",
    "logsumexp",
    "masked_attention",
    "mean",
    "no_grad",
    "param",
    "relu",
    "sigmoid",
    "sliding_windows",
    "softmax",
    "softplus",
    "sqrt",
    "square",
    "stack",
    "tanh",
    "tmax",
    "tsum",
]
