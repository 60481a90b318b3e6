"""Layers of the toy Relation Network, all operating on batched float64 arrays.

Each layer exposes ``forward(x, ...) -> (out, cache)`` and
``backward(grad, cache) -> grad_in``. Linear layers also expose ``linear`` and
``linear_t`` (bias-free map and its transpose with a substitute weight) which
the relevance rules build on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


@dataclass(eq=False)
class Conv2D:
    weight: np.ndarray  # (K, C, kh, kw)
    bias: np.ndarray  # (K,)
    stride: int = 1
    kind = "conv"

    @property
    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, ci, kh, kw = self.weight.shape
        if c != ci:
            raise ShapeMismatch(f"conv expects {ci} channels, got {c}")
        oh, ow = (h - kh) // self.stride + 1, (w - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"input {h}x{w} too small for kernel {kh}x{kw}")
        return (k, oh, ow)

    def _windows(self, x):
        kh, kw = self.weight.shape[2:]
        s = self.stride
        return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]

    def linear(self, x, weight=None):
        w = self.weight if weight is None else weight
        out = np.tensordot(self._windows(x), w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2)

    def linear_t(self, g, in_shape, weight=None):
        """Transpose of ``linear``: scatter (B, K, oh, ow) back onto the input grid."""
        w = self.weight if weight is None else weight
        b = g.shape[0]
        c, h, wd = in_shape[-3:]
        kh, kw = w.shape[2:]
        s = self.stride
        oh, ow = g.shape[2:]
        cols = np.tensordot(g, w, axes=([1], [0]))  # (B, oh, ow, C, kh, kw)
        dx = np.zeros((b, c, h, wd))
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx

    def forward(self, x):
        return self.linear(x) + self.bias[None, :, None, None], x

    def backward(self, grad, cache):
        return self.linear_t(grad, cache.shape)

    def param_grads(self, grad, cache) -> dict:
        dw = np.tensordot(grad, self._windows(cache), axes=([0, 2, 3], [0, 2, 3]))
        return {"weight": dw, "bias": grad.sum(axis=(0, 2, 3))}


@dataclass(eq=False)
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    kind = "dense"

    @property
    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, in_shape):
        if in_shape[-1] != self.weight.shape[0]:
            raise ShapeMismatch(f"dense expects {self.weight.shape[0]} features, got {in_shape[-1]}")
        return tuple(in_shape[:-1]) + (self.weight.shape[1],)

    def linear(self, x, weight=None):
        return x @ (self.weight if weight is None else weight)

    def linear_t(self, g, in_shape=None, weight=None):
        return g @ (self.weight if weight is None else weight).T

    def forward(self, x):
        return x @ self.weight + self.bias, x

    def backward(self, grad, cache):
        return grad @ self.weight.T

    def param_grads(self, grad, cache) -> dict:
        x2 = cache.reshape(-1, cache.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        return {"weight": x2.T @ g2, "bias": g2.sum(axis=0)}


@dataclass(eq=False)
class ReLU:
    kind = "relu"
    params = {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, grad, cache, mode: str = "standard"):
        if mode == "standard":
            return np.where(cache > 0, grad, 0.0)
        if mode == "deconvnet":
            return np.maximum(grad, 0.0)
        if mode == "guided":
            return np.maximum(np.where(cache > 0, grad, 0.0), 0.0)
        raise ValueError(f"unknown relu mode {mode!r}")


@dataclass(eq=False)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = False
    kind = "batchnorm"

    @property
    def params(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def out_shape(self, in_shape):
        if in_shape[0] != self.gamma.shape[0]:
            raise ShapeMismatch(f"batchnorm expects {self.gamma.shape[0]} channels, got {in_shape[0]}")
        return tuple(in_shape)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (a, b) with ``y = a * x + b`` in inference mode."""
        a = self.gamma / np.sqrt(self.running_var + self.eps)
        return a, self.beta - a * self.running_mean

    def forward(self, x):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        if not self.training:
            a, b = self.scale_shift()
            return x * a.reshape(shape) + b.reshape(shape), ("eval", x)
        axes = (0,) + tuple(range(2, x.ndim))
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * n / max(n - 1, 1)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
        return xhat * self.gamma.reshape(shape) + self.beta.reshape(shape), ("train", xhat, inv)

    def backward(self, grad, cache):
        shape = (1, -1) + (1,) * (grad.ndim - 2)
        if cache[0] == "eval":
            a, _ = self.scale_shift()
            return grad * a.reshape(shape)
        _, xhat, inv = cache
        axes = (0,) + tuple(range(2, grad.ndim))
        gxhat = grad * self.gamma.reshape(shape)
        return inv.reshape(shape) * (
            gxhat - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )

    def param_grads(self, grad, cache) -> dict:
        axes = (0,) + tuple(range(2, grad.ndim))
        xhat = cache[1] if cache[0] == "train" else None
        if xhat is None:
            shape = (1, -1) + (1,) * (grad.ndim - 2)
            xhat = (cache[1] - self.running_mean.reshape(shape)) / np.sqrt(self.running_var + self.eps).reshape(shape)
        return {"gamma": (grad * xhat).sum(axis=axes), "beta": grad.sum(axis=axes)}


def cell_coordinates(h: int, w: int) -> np.ndarray:
    """(h*w, 2) row/column coordinates of feature cells scaled to [-1, 1]."""
    rows = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    cols = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


@dataclass(eq=False)
class PairConcat:
    """All ordered cell pairs (i, j) as ``[f_i, c_i, f_j, c_j, q]`` rows.

    ``c`` are fixed cell coordinates (omitted when ``coords`` is False).
    Pair index is ``i * n + j`` for ``n`` cells in row-major order.
    """
    question_dim: int
    coords: bool = True
    kind = "pair"
    params = {}

    @property
    def n_coords(self) -> int:
        return 2 if self.coords else 0

    def out_shape(self, in_shape):
        k, h, w = in_shape
        n = h * w
        return (n * n, 2 * (k + self.n_coords) + self.question_dim)

    def cell_features(self, x):
        b, k, h, w = x.shape
        f = x.reshape(b, k, h * w).transpose(0, 2, 1)
        if self.coords:
            c = np.broadcast_to(cell_coordinates(h, w), (b, h * w, 2))
            f = np.concatenate([f, c], axis=2)
        return f

    def forward(self, x, q):
        b, k, h, w = x.shape
        if q.shape != (b, self.question_dim):
            raise ShapeMismatch(f"question embedding must be ({b}, {self.question_dim}), got {q.shape}")
        f = self.cell_features(x)
        n, d = f.shape[1], f.shape[2]
        out = np.empty((b, n, n, 2 * d + self.question_dim))
        out[:, :, :, :d] = f[:, :, None, :]
        out[:, :, :, d:2 * d] = f[:, None, :, :]
        out[:, :, :, 2 * d:] = q[:, None, None, :]
        return out.reshape(b, n * n, -1), x.shape

    def split(self, grad, x_shape):
        """Route a pair-space array back to (cell map, coordinates, question) parts."""
        b, k, h, w = x_shape
        n = h * w
        d = k + self.n_coords
        g = grad.reshape(b, n, n, -1)
        gf = g[:, :, :, :d].sum(axis=2) + g[:, :, :, d:2 * d].sum(axis=1)
        gx = gf[:, :, :k].transpose(0, 2, 1).reshape(b, k, h, w)
        gc = gf[:, :, k:]
        gq = g[:, :, :, 2 * d:].sum(axis=(1, 2))
        return gx, gc, gq

    def backward(self, grad, cache):
        gx, _, _ = self.split(grad, cache)
        return gx


@dataclass(eq=False)
class SumPool:
    """Sum over the pair axis."""
    kind = "sumpool"
    params = {}

    def out_shape(self, in_shape):
        return (in_shape[-1],)

    def forward(self, x):
        return x.sum(axis=1), x

    def backward(self, grad, cache):
        return np.broadcast_to(grad[:, None, :], cache.shape).copy()


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, Dense, ReLU, BatchNorm, PairConcat, SumPool)}
