"""Desk-scale laboratory for latent reasoning trained with compressed KV-cache distillation."""

from .tensor import Tensor, ShapeError, no_grad, stop_gradient, forward_backward
from .gradcheck import GradReport, grad_check

__version__ = "0.1.0"
