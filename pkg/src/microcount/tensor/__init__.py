"""Minimal float32 tensor engine with reverse-mode differentiation."""

from .core import DTYPE, ActivationPattern, FlopCounter, Tensor, as_tensor, backward, no_grad
from . import ops
from .ops import (
    absolute, add, batchnorm2d, concat, conv2d, div, expand, gelu, getitem, l1_loss,
    l2_normalize, layernorm, linear, matmul, max_pool2d, mean, mse_loss, mul, neg, relu,
    reshape, softmax, square, sub, sum_, swap_last, transpose,
)
from .gradcheck import GradCheckReport, grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

mean_pool = mean
