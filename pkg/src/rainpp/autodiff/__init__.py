from . import functional
from .functional import (adaptive_avg_pool, bilinear_sample, conv2d, cross_entropy, layer_norm,
                         log_softmax, pixel_shuffle, resize2d, softmax, upsample_bilinear)
from .gradcheck import check_gradients, numerical_grad, relative_error
from .optim import OptimState, adamw_step
from .tensor import (NonFiniteError, Tensor, add, as_tensor, backward, concat, div, exp, gelu,
                     getitem, grad, is_grad_enabled, log, matmul, mean, mul, no_grad, power,
                     relu, reshape, sqrt, sub, topological_order, transpose, tsum, where)

__all__ = [
    "Tensor", "NonFiniteError", "no_grad", "is_grad_enabled", "backward", "grad",
    "topological_order", "as_tensor", "add", "sub", "mul", "div", "power", "exp", "log",
    "sqrt", "relu", "gelu", "where", "tsum", "mean", "reshape", "transpose", "getitem",
    "concat", "matmul", "conv2d", "softmax", "log_softmax", "layer_norm", "bilinear_sample",
    "resize2d", "upsample_bilinear", "adaptive_avg_pool", "pixel_shuffle", "cross_entropy",
    "OptimState", "adamw_step", "check_gradients", "numerical_grad", "relative_error",
    "functional",
]
