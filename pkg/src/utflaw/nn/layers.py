"""Layers with hand-written forward/backward passes (NHWC batches)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError


class Layer:
    """Base layer. ``params``/``grads`` map names to arrays (empty for stateless layers)."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.input_shape = None
        self.output_shape = None

    def build(self, input_shape, rng, dtype=np.float64):
        self.input_shape = tuple(input_shape)
        self.output_shape = self.compute_output_shape(self.input_shape)
        return self.output_shape

    def compute_output_shape(self, input_shape):
        return input_shape

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def count_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def spec(self):
        """Hashable description used for checkpoints and equality."""
        return (self.kind,)

    def __repr__(self):
        return f"{type(self).__name__}{self.spec()[1:]}"


class Conv2D(Layer):
    """Valid-padding strided 2-D cross-correlation; kernel stored as (kh, kw, c_in, filters)."""

    kind = "conv2d"

    def __init__(self, filters, kernel_size=(5, 5), strides=(2, 2)):
        super().__init__()
        if filters < 1:
            raise ShapeError("filters must be >= 1")
        self.filters = int(filters)
        self.kernel_size = tuple(int(k) for k in kernel_size)
        self.strides = tuple(int(s) for s in strides)
        if min(self.kernel_size) < 1 or min(self.strides) < 1:
            raise ShapeError("kernel and stride must be >= 1")

    def spec(self):
        return (self.kind, self.filters, *self.kernel_size, *self.strides)

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"Conv2D expects (H, W, C) input, got {input_shape}")
        h, w, _ = input_shape
        kh, kw = self.kernel_size
        sh, sw = self.strides
        if kh > h or kw > w:
            raise ShapeError(f"kernel {self.kernel_size} larger than input {(h, w)}")
        return ((h - kh) // sh + 1, (w - kw) // sw + 1, self.filters)

    def build(self, input_shape, rng, dtype=np.float64):
        out = super().build(input_shape, rng, dtype)
        kh, kw = self.kernel_size
        c = input_shape[2]
        limit = np.sqrt(6.0 / (kh * kw * c))
        self.params = {
            "kernel": rng.uniform(-limit, limit, size=(kh, kw, c, self.filters)).astype(dtype),
            "bias": np.zeros(self.filters, dtype=dtype),
        }
        return out

    def _columns(self, x):
        kh, kw = self.kernel_size
        sh, sw = self.strides
        oh, ow, _ = self.output_shape
        win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
        # (N, oh, ow, C, kh, kw) -> (N*oh*ow, kh*kw*C) matching the kernel layout
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * x.shape[3])

    def forward(self, x, training=False, rng=None):
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"Conv2D input {x.shape[1:]} != built shape {self.input_shape}")
        cols = self._columns(x)
        self._cols = cols
        self._n = x.shape[0]
        w2 = self.params["kernel"].reshape(-1, self.filters)
        out = cols @ w2 + self.params["bias"]
        return out.reshape((x.shape[0],) + self.output_shape)

    def backward(self, dout):
        n = self._n
        kh, kw = self.kernel_size
        sh, sw = self.strides
        oh, ow, f = self.output_shape
        h, w, c = self.input_shape
        if dout.shape != (n, oh, ow, f):
            raise ShapeError(f"Conv2D upstream gradient {dout.shape} != {(n, oh, ow, f)}")
        d2 = dout.reshape(-1, f)
        kernel = self.params["kernel"]
        self.grads = {
            "kernel": (self._cols.T @ d2).reshape(kernel.shape),
            "bias": d2.sum(axis=0),
        }
        dcols = (d2 @ kernel.reshape(-1, f).T).reshape(n, oh, ow, kh, kw, c)
        dx = np.zeros((n, h, w, c), dtype=dout.dtype)
        for p in range(kh):
            for q in range(kw):
                dx[:, p : p + sh * (oh - 1) + 1 : sh, q : q + sw * (ow - 1) + 1 : sw, :] += dcols[:, :, :, p, q, :]
        self._cols = None
        return dx


class Dense(Layer):
    kind = "dense"

    def __init__(self, units):
        super().__init__()
        if units < 1:
            raise ShapeError("units must be >= 1")
        self.units = int(units)

    def spec(self):
        return (self.kind, self.units)

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeError(f"Dense expects flat input, got {input_shape}")
        return (self.units,)

    def build(self, input_shape, rng, dtype=np.float64):
        out = super().build(input_shape, rng, dtype)
        limit = np.sqrt(6.0 / input_shape[0])
        self.params = {
            "kernel": rng.uniform(-limit, limit, size=(input_shape[0], self.units)).astype(dtype),
            "bias": np.zeros(self.units, dtype=dtype),
        }
        return out

    def forward(self, x, training=False, rng=None):
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"Dense input {x.shape[1:]} != built shape {self.input_shape}")
        self._x = x
        return x @ self.params["kernel"] + self.params["bias"]

    def backward(self, dout):
        if dout.shape != (self._x.shape[0], self.units):
            raise ShapeError(f"Dense upstream gradient {dout.shape} does not match output")
        self.grads = {"kernel": self._x.T @ dout, "bias": dout.sum(axis=0)}
        dx = dout @ self.params["kernel"].T
        self._x = None
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        if dout.shape != self._mask.shape:
            raise ShapeError("ReLU gradient shape mismatch")
        return np.where(self._mask, dout, 0).astype(dout.dtype, copy=False)


class Dropout(Layer):
    """Inverted dropout: active only when ``training`` is true."""

    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def spec(self):
        return (self.kind, self.rate)

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._scale = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.rate
        self._scale = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * self._scale

    def backward(self, dout):
        if self._scale is None:
            return dout
        return dout * self._scale


class Flatten(Layer):
    kind = "flatten"

    def compute_output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape((dout.shape[0],) + self.input_shape)


class Softmax(Layer):
    """Output activation; training pairs it with cross-entropy via :func:`softmax_cross_entropy`."""

    kind = "softmax"

    def forward(self, x, training=False, rng=None):
        return softmax(x)

    def backward(self, dout):
        raise NotImplementedError("use softmax_cross_entropy for the output gradient")


def softmax(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, Dense, ReLU, Dropout, Flatten, Softmax)}


def layer_from_spec(spec) -> Layer:
    kind, *args = spec
    if kind == "conv2d":
        f, kh, kw, sh, sw = args
        return Conv2D(f, (kh, kw), (sh, sw))
    if kind == "dense":
        return Dense(*args)
    if kind == "dropout":
        return Dropout(*args)
    return LAYER_TYPES[kind]()
