"""Sequential container, parameter counting and the training step."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DivergenceError, ShapeError
from .layers import Conv2D, Dense, Layer, Softmax, softmax, softmax_cross_entropy


class Sequential:
    def __init__(self, layers: Sequence[Layer], input_shape, seed=0, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
        self.output_shape = shape

    # -- introspection ---------------------------------------------------

    def specs(self):
        return [layer.spec() for layer in self.layers]

    def parameters(self):
        """``(layer_index, name, array)`` in declaration order."""
        return [(k, name, arr) for k, layer in enumerate(self.layers) for name, arr in layer.params.items()]

    def param_arrays(self):
        return [arr for _, _, arr in self.parameters()]

    def get_weights(self):
        return [arr.copy() for arr in self.param_arrays()]

    def set_weights(self, weights):
        current = self.param_arrays()
        if len(weights) != len(current):
            raise ShapeError(f"expected {len(current)} arrays, got {len(weights)}")
        for dst, src in zip(current, weights):
            src = np.asarray(src)
            if src.shape != dst.shape:
                raise ShapeError(f"weight shape {src.shape} != {dst.shape}")
            dst[...] = src

    def summary(self):
        """Rows of ``(layer, output_shape, parameter_count)``."""
        return [(repr(layer), layer.output_shape, layer.count_params()) for layer in self.layers]

    # -- computation -----------------------------------------------------

    def _trunk(self):
        layers = self.layers
        return layers[:-1] if layers and isinstance(layers[-1], Softmax) else layers

    def logits(self, x, training=False, rng=None, step=None):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != model input {self.input_shape}")
        for k, layer in enumerate(self._trunk()):
            x = layer.forward(x, training=training, rng=rng)
            if step is not None and not np.all(np.isfinite(x)):
                bad = x[~np.isfinite(x)].flat[0]
                raise DivergenceError(f"{k}:{layer!r}", step, float(bad))
        return x

    def predict_proba(self, x, batch_size=256):
        x = np.asarray(x)
        out = []
        for s in range(0, x.shape[0], batch_size):
            out.append(softmax(self.logits(x[s : s + batch_size])))
        if not out:
            return np.zeros((0,) + self.output_shape, dtype=self.dtype)
        return np.concatenate(out)

    def backward(self, dlogits):
        d = dlogits
        for layer in reversed(self._trunk()):
            d = layer.backward(d)
        return d

    def l2_penalty(self, l2):
        if l2 == 0:
            return 0.0
        return l2 * sum(float(np.sum(layer.params["kernel"] ** 2)) for layer in self.layers if "kernel" in layer.params)

    def loss_and_grads(self, x, y, l2=0.0, training=False, rng=None, step=None):
        """Mean cross-entropy + ``l2 * sum(kernel**2)``; fills each layer's ``grads``."""
        z = self.logits(x, training=training, rng=rng, step=step)
        loss, dz = softmax_cross_entropy(z, y)
        loss += self.l2_penalty(l2)
        self.backward(dz.astype(self.dtype, copy=False))
        if l2:
            for layer in self.layers:
                if "kernel" in layer.params:
                    layer.grads["kernel"] = layer.grads["kernel"] + 2.0 * l2 * layer.params["kernel"]
        return loss

    def grad_arrays(self):
        return [layer.grads[name] for layer in self.layers for name in layer.params]


def count_parameters(model: Sequential):
    """Per parameterised layer counts and the total."""
    per_layer = [layer.count_params() for layer in model.layers if isinstance(layer, (Conv2D, Dense))]
    return per_layer, sum(per_layer)


def train_step(model: Sequential, optimizer, xb, yb, l2=0.0, rng=None, step=0):
    """One optimizer update on a batch; returns the pre-update loss."""
    loss = model.loss_and_grads(xb, yb, l2=l2, training=True, rng=rng, step=step)
    if not np.isfinite(loss):
        raise DivergenceError("loss", step, loss)
    optimizer.step(model.param_arrays(), model.grad_arrays())
    return loss
