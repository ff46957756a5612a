"""Tiny numpy layers with hand-written backward passes.

Layers are stateless: parameters live in a shared ``dict`` keyed by
``"<layer>.<name>"`` and every ``forward`` returns ``(output, cache)`` so the
same layer can be applied to several inputs before any backward call.
"""

from __future__ import annotations

import numpy as np


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int):
        self.name, self.n_in, self.n_out = name, n_in, n_out
        self.weight = f"{name}.weight"
        self.bias = f"{name}.bias"

    def init(self, params, rng):
        params[self.weight] = rng.standard_normal((self.n_in, self.n_out)) * np.sqrt(2.0 / self.n_in)
        params[self.bias] = np.zeros(self.n_out)

    def forward(self, params, x):
        return x @ params[self.weight] + params[self.bias], x

    def backward(self, params, x, grad, grads):
        grads[self.weight] += x.T @ grad
        grads[self.bias] += grad.sum(axis=0)
        return grad @ params[self.weight].T


class ReLU:
    def init(self, params, rng):
        pass

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, mask, grad, grads):
        return grad * mask


class Flatten:
    def init(self, params, rng):
        pass

    def forward(self, params, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, params, shape, grad, grads):
        return grad.reshape(shape)


class Conv3x3:
    """Same-padded 3x3 convolution on channels-last (N, W, H, C) input."""

    def __init__(self, name: str, c_in: int, c_out: int):
        self.name, self.c_in, self.c_out = name, c_in, c_out
        self.weight = f"{name}.weight"
        self.bias = f"{name}.bias"

    def init(self, params, rng):
        fan_in = 9 * self.c_in
        params[self.weight] = rng.standard_normal((fan_in, self.c_out)) * np.sqrt(2.0 / fan_in)
        params[self.bias] = np.zeros(self.c_out)

    @staticmethod
    def _patches(x):
        n, w, h, c = x.shape
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = [padded[:, i:i + w, j:j + h, :] for i in range(3) for j in range(3)]
        return np.concatenate(cols, axis=-1)

    def forward(self, params, x):
        patches = self._patches(x)
        return patches @ params[self.weight] + params[self.bias], (x.shape, patches)

    def backward(self, params, cache, grad, grads):
        shape, patches = cache
        n, w, h, c = shape
        grads[self.weight] += patches.reshape(-1, 9 * c).T @ grad.reshape(-1, self.c_out)
        grads[self.bias] += grad.sum(axis=(0, 1, 2))
        dpatches = grad @ params[self.weight].T
        dpadded = np.zeros((n, w + 2, h + 2, c))
        k = 0
        for i in range(3):
            for j in range(3):
                dpadded[:, i:i + w, j:j + h, :] += dpatches[..., k * c:(k + 1) * c]
                k += 1
        return dpadded[:, 1:-1, 1:-1, :]


class GlobalAvgPool:
    def init(self, params, rng):
        pass

    def forward(self, params, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, params, shape, grad, grads):
        n, w, h, c = shape
        return np.broadcast_to(grad[:, None, None, :] / (w * h), shape).copy()


class Sequential:
    def __init__(self, *layers):
        self.layers = layers

    def init(self, params, rng):
        for layer in self.layers:
            layer.init(params, rng)

    def forward(self, params, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x)
            caches.append(cache)
        return x, caches

    def backward(self, params, caches, grad, grads):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(params, cache, grad, grads)
        return grad


def l2_normalize(x, eps: float = 1e-12):
    """Row-wise ``x / (||x|| + eps)``; returns ``(normalized, norms)``."""
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / (norms + eps), norms


def l2_normalize_backward(x, norms, grad, eps: float = 1e-12):
    denom = norms + eps
    safe = np.where(norms > 0, norms, 1.0)
    radial = np.sum(x * grad, axis=-1, keepdims=True) / (denom * denom * safe)
    return grad / denom - x * radial


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class SGD:
    """Momentum SGD (``v <- mu*v + g + wd*p; p <- p - lr*v``)."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 no_decay: tuple[str, ...] = ()):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for name, grad in grads.items():
            if self.weight_decay and name not in self.no_decay:
                grad = grad + self.weight_decay * params[name]
            v = self.velocity.get(name)
            v = grad.copy() if v is None else self.momentum * v + grad
            self.velocity[name] = v
            params[name] -= lr * v
