"""Minimal CNN engine with manual backpropagation."""

from .layers import Conv2D, Dense, Dropout, Flatten, Layer, ReLU, Softmax, softmax, softmax_cross_entropy
from .model import Sequential, count_parameters, train_step
from .optim import SGD, Adam, make_optimizer

__all__ = [
    "Adam",
    "Conv2D",
    "Dense",
    "Dropout",
    "Flatten",
    "Layer",
    "ReLU",
    "SGD",
    "Sequential",
    "Softmax",
    "count_parameters",
    "make_optimizer",
    "softmax",
    "softmax_cross_entropy",
    "train_step",
]
