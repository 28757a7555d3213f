"""Tiny tanh MLP with an explicit reverse pass and a momentum-SGD helper."""
from __future__ import annotations

import numpy as np

from .errors import NumericError


class MLP:
    """Dense network: tanh on hidden layers, affine output.

    Weights are stored as ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(n, fan_in)`` maps as ``x @ W + b``.
    """

    def __init__(self, sizes, rng=None, scale=1.0, zero=False):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params):
        params = list(params)
        self.weights = [np.array(p, dtype=float) for p in params[0::2]]
        self.biases = [np.array(p, dtype=float) for p in params[1::2]]

    def copy(self):
        other = MLP.__new__(MLP)
        other.sizes = self.sizes
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def forward(self, x, keep=False):
        """Return the output, and the per-layer activations when ``keep``."""
        h = np.asarray(x, dtype=float)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite activation in layer {i}")
            acts.append(h)
        return (h, acts) if keep else h

    __call__ = forward

    def hidden(self, x):
        """Activations of every layer after the input (hidden layers, then output)."""
        return self.forward(x, keep=True)[1][1:]

    def backward(self, acts, grad_out, param_grads=True, extra_hidden=None):
        """Reverse pass through a cached forward.

        ``extra_hidden`` optionally maps a hidden-layer index (1-based, into
        ``acts``) to an additional cotangent injected at that activation.
        Returns ``(grad_input, grads)`` with ``grads`` ordered like ``params``.
        """
        g = np.asarray(grad_out, dtype=float)
        grads = [None] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                if extra_hidden and (i + 1) in extra_hidden:
                    g = g + extra_hidden[i + 1]
                g = g * (1.0 - acts[i + 1] ** 2)
            if param_grads:
                a_in = acts[i]
                if a_in.ndim == 1:
                    grads[2 * i] = np.outer(a_in, g)
                    grads[2 * i + 1] = g.copy()
                else:
                    grads[2 * i] = a_in.T @ g
                    grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return g, (grads if param_grads else None)

    def vjp(self, x, v):
        _, acts = self.forward(x, keep=True)
        return self.backward(acts, v, param_grads=False)[0]

    def to_dict(self):
        return {
            "sizes": list(self.sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        net = cls.__new__(cls)
        net.sizes = tuple(d["sizes"])
        net.weights = [np.array(w, dtype=float).reshape(a, b)
                       for w, a, b in zip(d["weights"], net.sizes[:-1], net.sizes[1:])]
        net.biases = [np.array(b, dtype=float) for b in d["biases"]]
        return net


class SGD:
    """Minibatch SGD with heavy-ball momentum (momentum=0 gives plain SGD)."""

    def __init__(self, params, lr, momentum=0.0, clip=None, weight_decay=0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.clip = clip
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        if self.clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * (g + self.weight_decay * p if p.ndim > 1 else g)
            p += v


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(logit, y):
    """Per-sample binary cross-entropy and its derivative in the logit."""
    logit = np.asarray(logit, dtype=float)
    y = np.asarray(y, dtype=float)
    loss = np.logaddexp(0.0, logit) - y * logit
    return loss, sigmoid(logit) - y
