"""Central finite-difference checks for layer and loss gradients."""

from __future__ import annotations

import numpy as np

from .layers import softmax_cross_entropy

#: denominators below this are clamped so near-zero gradients compare absolutely
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def numeric_gradient(f, x, eps=1e-5):
    """d f / d x for scalar ``f()`` that reads ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def check_layer(layer, x, upstream, seed=0, eps=1e-5) -> dict:
    """Max relative error of d<upstream, layer(x)>/d{x, params}.

    Training-mode layers draw from ``default_rng(seed)`` on every call, so
    a dropout mask stays fixed across the perturbed evaluations.
    """

    def objective():
        out = layer.forward(x, training=True, rng=np.random.default_rng(seed))
        return float(np.sum(out * upstream))

    layer.forward(x, training=True, rng=np.random.default_rng(seed))
    dx = layer.backward(upstream)
    analytic = {name: g.copy() for name, g in layer.grads.items()}
    errors = {"input": relative_error(dx, numeric_gradient(objective, x, eps))}
    for name, p in layer.params.items():
        errors[name] = relative_error(analytic[name], numeric_gradient(objective, p, eps))
    return errors


def check_softmax_cross_entropy(logits, labels, eps=1e-5) -> float:
    _, grad = softmax_cross_entropy(logits, labels)
    numeric = numeric_gradient(lambda: softmax_cross_entropy(logits, labels)[0], logits, eps)
    return relative_error(grad, numeric)
