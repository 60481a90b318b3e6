"""Minibatch Adam training of the Relation Network with softmax cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import BatchNorm, Dense, PairConcat, SumPool
from .model import Model, forward, softmax


class DivergedTraining(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # global L2 norm; 0 disables


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    p = softmax(logits)
    n = len(labels)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def gradients(model: Model, x: np.ndarray, token_ids: Sequence[Sequence[int]], labels: np.ndarray):
    """Loss and gradients for every entry of ``model.parameters()`` (same order)."""
    q = np.stack([model.encoder.encode_ids(t) for t in token_ids]) if model.encoder else None
    logits, trace = forward(model, x, q, check_finite=False)  # the caller checks the loss
    loss, g = cross_entropy(logits, labels)
    grads: dict[tuple[int, str], np.ndarray] = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        cache = trace.caches[i]
        if layer.params:
            for name, value in layer.param_grads(g, cache).items():
                grads[(i, name)] = value
        if isinstance(layer, PairConcat):
            g, _, gq = layer.split(g, cache)
            if model.encoder is not None:
                table_grad = np.zeros_like(model.encoder.table)
                rows = [t for ids in token_ids for t in ids]
                owners = [b for b, ids in enumerate(token_ids) for _ in ids]
                np.add.at(table_grad, rows, gq[owners])
                grads[(-1, "embedding")] = table_grad
        elif i > 0:
            g = layer.backward(g, cache)
    return loss, [grads[(i, name)] for i, name, _ in model.parameters()]


def lr_scales(model: Model) -> list[float]:
    """Per-parameter learning-rate multipliers.

    The weight of the first dense layer after the pair sum is initialised
    ``1 / n_pairs`` times smaller than its neighbours; scaling its step by the
    same factor makes Adam behave as if the sum were a mean.
    """
    scales = {}
    shape = tuple(model.input_shape)
    after_pool = False
    for i, layer in enumerate(model.layers):
        if isinstance(layer, SumPool):
            n_pairs = shape[0]
            after_pool = True
        elif after_pool and isinstance(layer, Dense):
            scales[(i, "weight")] = 1.0 / n_pairs
            after_pool = False
        shape = layer.out_shape(shape)
    return [scales.get((i, name), 1.0) for i, name, _ in model.parameters()]


def train(model: Model, images: np.ndarray, image_index: Sequence[int], token_ids: Sequence[Sequence[int]],
          labels: Sequence[int], config: TrainConfig = TrainConfig(), seed: int = 0,
          log=None) -> list[float]:
    """Train in place; sample ``k`` is (images[image_index[k]], token_ids[k], labels[k]).

    Returns the mean training loss per epoch. Batchnorm layers use batch
    statistics during training and are left in inference mode afterwards.
    With ``lr == 0`` nothing changes, running statistics included.
    """
    labels = np.asarray(labels, dtype=int)
    image_index = np.asarray(image_index, dtype=int)
    n = len(labels)
    if n == 0:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    scales = lr_scales(model)
    m = [np.zeros_like(p) for _, _, p in params]
    v = [np.zeros_like(p) for _, _, p in params]
    history = []
    step = 0
    norms = [l for l in model.layers if isinstance(l, BatchNorm)]
    momenta = [l.momentum for l in norms]
    if config.lr == 0:
        for layer in norms:
            layer.momentum = 0.0
    model.set_training(True)
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, config.batch_size):
                batch = order[start:start + config.batch_size]
                if len(batch) < 2 and any(isinstance(l, BatchNorm) for l in model.layers):
                    continue  # batch statistics need at least two samples
                loss, grads = gradients(model, images[image_index[batch]],
                                        [token_ids[k] for k in batch], labels[batch])
                if not np.isfinite(loss):
                    raise DivergedTraining(f"loss became {loss} at epoch {epoch}")
                total += loss * len(batch)
                if config.grad_clip > 0:
                    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                    if norm > config.grad_clip:
                        grads = [g * (config.grad_clip / norm) for g in grads]
                step += 1
                c1 = 1 - config.beta1 ** step
                c2 = 1 - config.beta2 ** step
                for k, ((_, _, p), g) in enumerate(zip(params, grads)):
                    if config.weight_decay:
                        g = g + config.weight_decay * p
                    m[k] = config.beta1 * m[k] + (1 - config.beta1) * g
                    v[k] = config.beta2 * v[k] + (1 - config.beta2) * g * g
                    p -= scales[k] * config.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + config.adam_eps)
            history.append(total / n)
            if log is not None:
                log(f"epoch {epoch + 1}/{config.epochs} loss {history[-1]:.4f}")
    finally:
        model.set_training(False)
        for layer, mom in zip(norms, momenta):
            layer.momentum = mom
    return history


def accuracy(model: Model, images: np.ndarray, image_index: Sequence[int],
             token_ids: Sequence[Sequence[int]], labels: Sequence[int], batch_size: int = 256) -> float:
    labels = np.asarray(labels, dtype=int)
    image_index = np.asarray(image_index, dtype=int)
    correct = 0
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        q = np.stack([model.encoder.encode_ids(t) for t in token_ids[sl]])
        logits, _ = forward(model, images[image_index[sl]], q)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels[sl]))
    return correct / len(labels)
