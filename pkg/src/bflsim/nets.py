"""Small fully-connected networks over flat parameter vectors, with manual backprop."""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = ["MLP"]


class MLP:
    """tanh hidden layers, linear output.

    Parameters are one flat vector laid out layer by layer as ``W`` (out x in,
    row-major) followed by ``b``.
    """

    def __init__(self, sizes: Sequence[int]):
        if len(sizes) < 2:
            raise ValueError("an MLP needs input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.shapes = [(self.sizes[i + 1], self.sizes[i]) for i in range(len(self.sizes) - 1)]
        offs = [0]
        for o, i in self.shapes:
            offs.append(offs[-1] + o * i + o)
        self.offsets = offs

    @property
    def n_params(self) -> int:
        return self.offsets[-1]

    def unpack(self, theta):
        out = []
        for k, (o, i) in enumerate(self.shapes):
            a = self.offsets[k]
            out.append((theta[a:a + o * i].reshape(o, i), theta[a + o * i:a + o * i + o]))
        return out

    def init(self, rng: np.random.Generator, out_scale: float = 0.01) -> np.ndarray:
        theta = np.zeros(self.n_params)
        last = len(self.shapes) - 1
        for k, (W, _) in enumerate(self.unpack(theta)):
            o, i = W.shape
            scale = out_scale if k == last else np.sqrt(1.0 / i)
            W[...] = scale * rng.standard_normal((o, i))
        return theta

    def forward(self, theta, X):
        """Return ``(output, cache)``; ``X`` has shape ``(B, in)``."""
        acts = [X]
        layers = self.unpack(theta)
        h = X
        for k, (W, b) in enumerate(layers):
            z = h @ W.T + b
            h = z if k == len(layers) - 1 else np.tanh(z)
            acts.append(h)
        return h, acts

    def backward(self, theta, acts, d_out) -> np.ndarray:
        """Gradient of ``sum(d_out * output)`` with respect to ``theta``."""
        grad = np.empty(self.n_params)
        layers = self.unpack(theta)
        delta = d_out
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            o, i = W.shape
            a = self.offsets[k]
            grad[a:a + o * i] = (delta.T @ acts[k]).ravel()
            grad[a + o * i:a + o * i + o] = delta.sum(axis=0)
            if k:
                delta = (delta @ W) * (1.0 - acts[k] ** 2)
        return grad
