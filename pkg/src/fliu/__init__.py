"""Federated learning simulator for FedAvg, FLIU personalization and local-only training."""

from .dataset import LabeledDataset, generate_synthetic, load_cifar10, load_idx
from .federation import Strategy, gamma_adaptive, individualized_update
from .partition import Partition, build_partition, sinkhorn_knopp

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset",
    "Partition",
    "Strategy",
    "build_partition",
    "gamma_adaptive",
    "generate_synthetic",
    "individualized_update",
    "load_cifar10",
    "load_idx",
    "sinkhorn_knopp",
]
