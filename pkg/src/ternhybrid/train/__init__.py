"""Torch-based training of hybrid models."""

from .losses import hinge_loss, kd_loss, kd_term
from .torchmodel import THybrid, to_torch
from .trainer import History, TrainConfig, grad_check, quantize_aware_step, set_phase, train

__all__ = [
    "History",
    "THybrid",
    "TrainConfig",
    "grad_check",
    "hinge_loss",
    "kd_loss",
    "kd_term",
    "quantize_aware_step",
    "set_phase",
    "to_torch",
    "train",
]
