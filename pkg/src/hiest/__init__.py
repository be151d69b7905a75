"""Hierarchical spatio-temporal traffic forecasting on a numpy autodiff core."""

from .autodiff import Tensor, no_grad
from .graph import SensorGraph, build_adjacency, build_hierarchy, build_mor, regional_adjacency, tarjan_bcc
from .model import Hiest, HiestConfig

__all__ = [
    "Tensor",
    "no_grad",
    "SensorGraph",
    "build_adjacency",
    "build_hierarchy",
    "build_mor",
    "regional_adjacency",
    "tarjan_bcc",
    "Hiest",
    "HiestConfig",
]

__version__ = "0.1.0"
