"""Desk-scale laboratory for adapter design-space search in conditional
U-Net diffusion models: position taxonomy, function forms, training,
sampling, evaluation, and one-way ANOVA over sweep results."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
