from .layers import (Layer, Conv1d, Dense, BatchNorm, ReLU, LeakyReLU, Sigmoid,
                     Tanh, MaxPool1d, GlobalAvgPool, Flatten, Reshape, make_layer)
from .core import Network, save_network, load_network, copy_params
from .train import sgd_update, apply_sgd, grad_check

__all__ = [
    "Layer", "Conv1d", "Dense", "BatchNorm", "ReLU", "LeakyReLU", "Sigmoid",
    "Tanh", "MaxPool1d", "GlobalAvgPool", "Flatten", "Reshape", "make_layer",
    "Network", "save_network", "load_network", "copy_params",
    "sgd_update", "apply_sgd", "grad_check",
]
