"""Layer-wise relevance propagation for the Relation Network.

Relevance starts as the target logit and flows back layer by layer. Linear
layers (conv, dense, inference-mode batchnorm as a per-channel affine map) use
the epsilon or alpha1-beta0 rule; ReLUs pass relevance unchanged; the pair sum
splits relevance in proportion to each pair's contribution; the pairing layer
sends relevance back to the image cells it copied, and the parts that belong
to coordinates and the question embedding leave the image-side map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..micronet.layers import BatchNorm, Conv2D, Dense, PairConcat, ReLU, SumPool
from ..micronet.model import Model, forward, merge_batchnorm
from .methods import _check_input

HIDDEN_RULES = ("epsilon", "alphabeta")
COMPOSITES = ("none", "classifier_epsilon", "all_dense_epsilon")
INPUT_RULES = ("none", "box", "w_squared", "flat")


class UnsupportedLayer(TypeError):
    pass


@dataclass(frozen=True)
class LRPConfig:
    hidden_rule: str = "alphabeta"
    composite: str = "none"
    input_rule: str = "box"
    epsilon: float = 1e-3
    input_bounds: tuple = (0.0, 1.0)  # (low, high), scalars or per-channel sequences
    merge_batchnorm: bool = False

    def __post_init__(self):
        if self.hidden_rule not in HIDDEN_RULES:
            raise ValueError(f"unknown hidden rule {self.hidden_rule!r}")
        if self.composite not in COMPOSITES:
            raise ValueError(f"unknown composite {self.composite!r}")
        if self.input_rule not in INPUT_RULES:
            raise ValueError(f"unknown input rule {self.input_rule!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        low, high = (np.asarray(b, dtype=float) for b in self.input_bounds)
        if np.any(low > high):
            raise ValueError("input_bounds need low <= high")


EXCITATION_BACKPROP = LRPConfig(hidden_rule="alphabeta", composite="none", input_rule="none")


@dataclass
class LRPTrace:
    """Relevance bookkeeping of one propagation.

    ``sums[i]`` is the total relevance at the input of layer ``i`` (for the
    pairing layer: the image-side part only); ``dropped`` is what went to the
    coordinate and question inputs; ``start`` the initial relevance;
    ``relevance[i]`` the full relevance array at the input of layer ``i``.
    """
    start: float
    sums: dict = field(default_factory=dict)
    relevance: dict = field(default_factory=dict)
    dropped: float = 0.0


def _safe_div(num, den):
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def _stabilize(z, eps):
    return z + eps * np.where(z >= 0, 1.0, -1.0)


class _Linear:
    """Uniform view of conv / dense / inference batchnorm as ``z = lin(x, W) + b``."""

    def __init__(self, layer, x):
        self.layer = layer
        self.x = x
        if isinstance(layer, BatchNorm):
            a, b = layer.scale_shift()
            shape = (1, -1) + (1,) * (x.ndim - 2)
            self.weight = a
            self.bias = b.reshape(shape)
            self._shape = shape
        elif isinstance(layer, Conv2D):
            self.weight = layer.weight
            self.bias = layer.bias[None, :, None, None]
        else:
            self.weight = layer.weight
            self.bias = layer.bias

    def lin(self, x, w):
        if isinstance(self.layer, BatchNorm):
            return x * w.reshape(self._shape)
        if isinstance(self.layer, Conv2D):
            return self.layer.linear(x, w)
        return x @ w

    def lin_t(self, g, w):
        if isinstance(self.layer, BatchNorm):
            return g * w.reshape(self._shape)
        if isinstance(self.layer, Conv2D):
            return self.layer.linear_t(g, self.x.shape, w)
        return g @ w.T


def epsilon_rule(op: _Linear, relevance, eps: float):
    z = op.lin(op.x, op.weight) + op.bias
    s = relevance / _stabilize(z, eps)
    return op.x * op.lin_t(s, op.weight)


def alphabeta_rule(op: _Linear, relevance):
    """alpha=1, beta=0: only positive contributions z_i w_ij > 0 (and positive bias) share relevance."""
    xp, xn = np.maximum(op.x, 0.0), np.minimum(op.x, 0.0)
    wp, wn = np.maximum(op.weight, 0.0), np.minimum(op.weight, 0.0)
    zp = op.lin(xp, wp) + op.lin(xn, wn)
    s = _safe_div(relevance, zp + np.maximum(op.bias, 0.0))
    return xp * op.lin_t(s, wp) + xn * op.lin_t(s, wn)


def _bounds(bounds, x):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    low, high = (np.broadcast_to(np.asarray(b, dtype=float).reshape(shape) if np.ndim(b) else b, x.shape)
                 for b in bounds)
    return low, high


def box_rule(op: _Linear, relevance, bounds):
    x = op.x
    low, high = _bounds(bounds, x)
    wp, wn = np.maximum(op.weight, 0.0), np.minimum(op.weight, 0.0)
    z = op.lin(x, op.weight) - op.lin(low, wp) - op.lin(high, wn)
    s = _safe_div(relevance, z)
    return x * op.lin_t(s, op.weight) - low * op.lin_t(s, wp) - high * op.lin_t(s, wn)


def w_squared_rule(op: _Linear, relevance):
    w2 = op.weight ** 2
    den = op.lin(np.ones_like(op.x), w2)
    return op.lin_t(_safe_div(relevance, den), w2)


def flat_rule(op: _Linear, relevance):
    ones = np.ones_like(op.weight)
    den = op.lin(np.ones_like(op.x), ones)
    return op.lin_t(_safe_div(relevance, den), ones)


def layer_rules(model: Model, cfg: LRPConfig) -> dict[int, str]:
    """Rule name ("epsilon", "alphabeta" or an input rule) for each linear layer index."""
    dense = model.dense_indices()
    eps_layers = set()
    if cfg.composite == "classifier_epsilon":
        eps_layers = set(dense[-3:])
    elif cfg.composite == "all_dense_epsilon":
        eps_layers = set(dense)
    rules = {}
    first = None
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (Conv2D, Dense, BatchNorm)):
            if first is None:
                first = i
            rules[i] = "epsilon" if i in eps_layers else cfg.hidden_rule
    if first is not None and cfg.input_rule != "none":
        rules[first] = cfg.input_rule
    return rules


def lrp(model: Model, x, q, target: int, cfg: LRPConfig = LRPConfig(), return_trace: bool = False):
    """LRP relevance (C, H, W) of the target logit; with ``return_trace`` also an LRPTrace."""
    x = _check_input(model, x)
    net = merge_batchnorm(model) if cfg.merge_batchnorm else model
    for layer in net.layers:
        if type(layer) not in (Conv2D, Dense, BatchNorm, ReLU, PairConcat, SumPool):
            raise UnsupportedLayer(f"no relevance rule for layer {type(layer).__name__}")
        if isinstance(layer, BatchNorm) and layer.training:
            raise UnsupportedLayer("batchnorm in training mode")
    logits, trace = forward(net, x, q)
    rel = np.zeros((1, logits.shape[0]))
    rel[0, target] = logits[target]
    info = LRPTrace(start=float(logits[target]))
    rules = layer_rules(net, cfg)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        a = trace.inputs[i]
        if isinstance(layer, ReLU):
            pass
        elif isinstance(layer, SumPool):
            rel = a * (rel / _stabilize(trace.outputs[i], cfg.epsilon))[:, None, :]
        elif isinstance(layer, PairConcat):
            gx, gc, gq = layer.split(rel, a.shape)
            info.dropped += float(gc.sum() + gq.sum())
            rel = gx
        else:
            op = _Linear(layer, a)
            rule = rules[i]
            if rule == "epsilon":
                rel = epsilon_rule(op, rel, cfg.epsilon)
            elif rule == "alphabeta":
                rel = alphabeta_rule(op, rel)
            elif rule == "box":
                rel = box_rule(op, rel, cfg.input_bounds)
            elif rule == "w_squared":
                rel = w_squared_rule(op, rel)
            else:
                rel = flat_rule(op, rel)
        info.sums[i] = float(rel.sum())
        if return_trace:
            info.relevance[i] = rel
    out = rel[0]
    return (out, info) if return_trace else out
