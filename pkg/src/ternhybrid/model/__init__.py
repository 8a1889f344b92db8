"""Hybrid model graph, cost analysis, serialization and architecture files."""

from .analysis import OpReport, count_ops, memory_footprint, model_size
from .arch import ArchSpec, build_model
from .graph import (
    AvgPool,
    Conv2D,
    DenseHead,
    Flatten,
    HybridModel,
    collapsed,
    densified,
    forward,
    forward_counted,
)
from .serialize import load, save

__all__ = [
    "ArchSpec",
    "AvgPool",
    "Conv2D",
    "DenseHead",
    "Flatten",
    "HybridModel",
    "OpReport",
    "build_model",
    "collapsed",
    "count_ops",
    "densified",
    "forward",
    "forward_counted",
    "load",
    "memory_footprint",
    "model_size",
    "save",
]
