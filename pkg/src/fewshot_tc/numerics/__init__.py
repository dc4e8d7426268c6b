"""Tensor arithmetic, reverse-mode autodiff (to second order) and optimizers."""
from .tensor import (Tensor, add, as_tensor, backward, broadcast_to, concat, div,
                     exp, gather, getitem, grad, higher_order_grad, is_grad_enabled,
                     log, matmul, mean, mul, neg, no_grad, pad, power, relu,
                     reshape, scale, scatter_add, set_grad_enabled, sigmoid, sqrt,
                     stack, sub, sum_, sum_to, swapaxes, transpose)
from .functional import (batch_norm, conv2d, cosine_similarity, cross_entropy,
                         kl_div, l2_normalize, linear, log_softmax, mse,
                         same_padding, soft_cross_entropy, softmax, sq_euclidean)
from .optim import LRSchedule, Optimizer, OptimizerState, optimizer_step

__all__ = [name for name in dir() if not name.startswith("_")]
