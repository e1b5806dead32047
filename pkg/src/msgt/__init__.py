"""Windowed local attention with messenger-token channel shuffling.

A desk-scale stack: a small autodiff tensor engine, window partitioning
and shuffle-region machinery, the messenger-token transformer block and
hierarchical model, exact cost/receptive-field analysis, and a training
and ablation harness with a CLI.
"""

from .tensor import Tensor, grad_check, no_grad, count_macs

__all__ = ["Tensor", "grad_check", "no_grad", "count_macs"]
