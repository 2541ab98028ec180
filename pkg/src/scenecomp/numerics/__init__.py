from .tensor import (
    Tensor, as_tensor, backward, no_grad, grad_enabled, set_default_dtype, get_default_dtype,
    default_dtype, add, sub, mul, div, neg, power, exp, log, sqrt, tanh, sigmoid, softplus, relu,
    silu, gelu, absolute, maximum, where, matmul, tsum, mean, reshape, transpose, swapaxes, expand,
    getitem, concat, stack, split, scatter_add, prod_last, unbroadcast,
)
from .functional import linear, softmax, layer_norm, softmax_attention, LN_EPS
from .nn import Module, Linear, LayerNorm, MLP, MultiHeadAttention, TransformerLayer, param, normal_param
from .optim import AdamW, AdamState, adamw_step
from .checkpoint import save_arrays, load_arrays, CheckpointFormatError
from .gradcheck import numerical_grad, max_rel_error, check_grads

__all__ = [name for name in dir() if not name.startswith("_")]
