"""Small fully-connected networks with hand-written backprop and Adam.

Everything is float64.  Parameters are exposed as a flat list
``[W0, b0, W1, b1, ...]`` so optimizers and checkpoints can walk them in
a fixed order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


class DenseNet:
    """MLP with ReLU hidden layers and an identity output layer."""

    def __init__(self, input_dim: int, hidden_sizes, output_dim: int,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [input_dim, *hidden_sizes, output_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self.activations: list[str] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last:
                bound = np.sqrt(6.0 / (fan_in + fan_out))  # Xavier-uniform
            else:
                bound = np.sqrt(6.0 / fan_in)  # He-uniform
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
            self.activations.append("identity" if last else "relu")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params) -> None:
        params = list(params)
        for i in range(len(self.weights)):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError("parameter shape mismatch")
            # in place, so optimizers holding references stay attached
            self.weights[i][...] = w
            self.biases[i][...] = b

    def copy(self) -> "DenseNet":
        other = object.__new__(DenseNet)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.activations = list(self.activations)
        return other

    def forward(self, x, return_cache: bool = False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        cache = [x]
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = h @ w + b
            if act == "relu":
                h = relu(h)
            cache.append(h)
        return (h, cache) if return_cache else h

    __call__ = forward

    def backward(self, cache, output_grad):
        """Gradients of ``sum(output * output_grad)``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` in the
        same order as :meth:`params`.
        """
        grad = np.asarray(output_grad, dtype=float)
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            out = cache[i + 1]
            if self.activations[i] == "relu":
                grad = grad * (out > 0)
            inp = cache[i]
            inp2 = inp.reshape(-1, inp.shape[-1])
            g2 = grad.reshape(-1, grad.shape[-1])
            grads[2 * i] = inp2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grads, grad


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        """In-place bias-corrected Adam update of ``self.params``."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam, lr: float | None = None):
    """Functional wrapper: updates ``params`` in place through ``state``."""
    if lr is not None:
        state.lr = lr
    state.step(grads)
    return params
