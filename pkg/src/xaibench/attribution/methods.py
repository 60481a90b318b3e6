"""Gradient-based explanation methods.

Every method takes ``(model, x, q, target)`` with ``x`` a (C, H, W) image,
``q`` the question embedding (or None) and ``target`` the explained class,
and returns a (C, H, W) relevance array (Grad-CAM returns a 2D map).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..masks import resize_image
from ..micronet.model import Model, backward, forward, layer_gradient


class DiscardPoint(ValueError):
    """The method cannot give a reliable result for this input; skip it when scoring."""


class DegenerateSpan(DiscardPoint):
    """Integrated gradients with f_c(x) == f_c(x') for a baseline different from x."""


class LayerNotFound(KeyError):
    pass


def _check_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != tuple(model.input_shape):
        raise ValueError(f"expected a single input of shape {tuple(model.input_shape)}, got {x.shape}")
    return x


def target_logit(model: Model, x, q, target: int) -> float:
    logits, _ = forward(model, x, q)
    return float(logits[target])


def gradient_attribution(model: Model, x, q, target: int, squared: bool = False,
                         times_input: bool = False) -> np.ndarray:
    x = _check_input(model, x)
    _, trace = forward(model, x, q)
    g = backward(model, trace, target)
    return _finish(g, x, squared, times_input)


def _finish(g, x, squared, times_input):
    if squared:
        g = g * g
    if times_input:
        g = g * x
    return g


def _batch_gradients(model: Model, xs: np.ndarray, q, target: int) -> np.ndarray:
    _, trace = forward(model, xs, q)
    return backward(model, trace, target)


@dataclass(frozen=True)
class NoiseConfig:
    """Gaussian input noise for SmoothGrad / VarGrad.

    ``batch_size`` > 1 evaluates several noisy copies per forward pass. That is
    faster but batched BLAS calls may round differently in the last bit, so the
    default of 1 is the reference behaviour.
    """
    sigma: float = 0.05
    n: int = 50
    seed: int = 0
    batch_size: int = 1

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if self.n < 1 or self.batch_size < 1:
            raise ValueError("n and batch_size must be positive")


def noisy_gradients(model: Model, x, q, target: int, cfg: NoiseConfig):
    """Yield the gradient at each noisy copy of ``x``, in sample order.

    Noise for sample k is ``(x.max() - x.min()) * sigma * z_k`` with ``z_k``
    the k-th (C, H, W) block of standard normals from ``default_rng(seed)``.
    """
    x = _check_input(model, x)
    rng = np.random.default_rng(cfg.seed)
    amplitude = (x.max() - x.min()) * cfg.sigma
    done = 0
    while done < cfg.n:
        b = min(cfg.batch_size, cfg.n - done)
        z = rng.standard_normal((b,) + x.shape)
        if b == 1:
            _, trace = forward(model, x + amplitude * z[0], q)
            yield backward(model, trace, target)
        else:
            yield from _batch_gradients(model, x[None] + amplitude * z, q, target)
        done += b


def smoothgrad(model: Model, x, q, target: int, cfg: NoiseConfig = NoiseConfig(),
               squared: bool = False, times_input: bool = False) -> np.ndarray:
    x = _check_input(model, x)
    mean = np.zeros_like(x)
    # running mean: identical samples leave it bit-for-bit unchanged
    for k, g in enumerate(noisy_gradients(model, x, q, target, cfg), start=1):
        mean += (_finish(g, x, squared, times_input) - mean) / k
    return mean


def vargrad(model: Model, x, q, target: int, cfg: NoiseConfig = NoiseConfig()) -> np.ndarray:
    """Population variance (divide by n) of the noisy gradients."""
    x = _check_input(model, x)
    mean = np.zeros_like(x)
    m2 = np.zeros_like(x)
    for k, g in enumerate(noisy_gradients(model, x, q, target, cfg), start=1):
        delta = g - mean
        mean += delta / k
        m2 += delta * (g - mean)
    return m2 / cfg.n


def modified_backprop(model: Model, x, q, target: int, mode: str = "guided",
                      scope: str = "all") -> np.ndarray:
    """Deconvnet (``mode="deconvnet"``) or guided backpropagation (``mode="guided"``)."""
    if mode not in ("deconvnet", "guided"):
        raise ValueError(f"unknown mode {mode!r}")
    x = _check_input(model, x)
    _, trace = forward(model, x, q)
    return backward(model, trace, target, relu_mode=mode, relu_scope=scope)


@dataclass(frozen=True)
class GradCamIntermediate:
    feature_maps: np.ndarray  # (K, h, w)
    weights: np.ndarray  # (K,)
    raw: np.ndarray  # (h, w)
    upsampled: np.ndarray  # (H, W)
    zero_flag: bool


def gradcam_heatmap(feature_maps: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """ReLU of the weighted sum of feature maps."""
    return np.maximum(np.tensordot(weights, feature_maps, axes=1), 0.0)


def gradcam_from_maps(feature_maps: np.ndarray, grads: np.ndarray,
                      size: tuple[int, int] | None = None) -> GradCamIntermediate:
    """Grad-CAM from feature maps A (K, h, w) and the target's gradient w.r.t. A."""
    a = np.asarray(feature_maps, dtype=float)
    weights = np.asarray(grads, dtype=float).mean(axis=(1, 2))
    raw = gradcam_heatmap(a, weights)
    zero = not np.any(raw)
    if size is None or tuple(size) == raw.shape:
        up = raw.copy()
    else:
        up = np.maximum(resize_image(raw, size), 0.0)  # bilinear weights are >= 0; clears -0.0
    return GradCamIntermediate(a, weights, raw, up, zero)


def grad_cam(model: Model, x, q, target: int, layer: str = "relu") -> GradCamIntermediate:
    """Grad-CAM on the output of the ``conv``, ``relu`` or ``batchnorm`` layer of the last conv block."""
    x = _check_input(model, x)
    block = model.last_conv_block()
    if layer not in block:
        raise LayerNotFound(f"last conv block has no {layer!r} layer (has {sorted(block)})")
    idx = block[layer]
    _, trace = forward(model, x, q)
    grads = layer_gradient(model, trace, target, idx)
    maps = trace.outputs[idx][0]
    return gradcam_from_maps(maps, grads, tuple(model.input_shape[1:]))


def guided_grad_cam(model: Model, x, q, target: int, layer: str = "relu",
                    scope: str = "all") -> np.ndarray:
    cam = grad_cam(model, x, q, target, layer)
    if cam.zero_flag:
        raise DiscardPoint("Grad-CAM heatmap is identically zero")
    guided = modified_backprop(model, x, q, target, "guided", scope)
    return guided * cam.upsampled[None]


IG_SCHEDULE = (300, 1000, 3000, 10000, 30000)
IG_BASELINES = ("zeros", "mean_image", "mean_channels", "custom")


@dataclass(frozen=True)
class IGConfig:
    """``mean_image`` is needed by the mean-image and mean-channel baselines; ``custom`` by the custom one."""
    baseline: str = "mean_channels"
    step_schedule: tuple[int, ...] = IG_SCHEDULE
    tolerance: float = 0.01
    mean_image: np.ndarray | None = None
    custom: np.ndarray | None = None
    batch_size: int = 100

    def __post_init__(self):
        if self.baseline not in IG_BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        s = tuple(self.step_schedule)
        if not s or any(b <= a for a, b in zip(s, s[1:])) or s[0] < 1:
            raise ValueError("step schedule must be strictly increasing positive integers")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


def ig_baseline(cfg: IGConfig, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(shape)
    if cfg.baseline == "zeros":
        return np.zeros(shape)
    if cfg.baseline == "custom":
        base = cfg.custom
    elif cfg.mean_image is None:
        raise ValueError(f"baseline {cfg.baseline!r} needs the dataset mean image")
    elif cfg.baseline == "mean_image":
        base = cfg.mean_image
    else:
        m = np.asarray(cfg.mean_image, dtype=float)
        base = np.broadcast_to(m.mean(axis=(1, 2))[:, None, None], m.shape)
    base = np.asarray(base, dtype=float)
    if base.shape != shape:
        raise ValueError(f"baseline shape {base.shape} != input shape {shape}")
    return np.array(base)


def ig_riemann(model: Model, x, baseline, q, target: int, steps: int, batch_size: int = 100) -> np.ndarray:
    """Midpoint Riemann sum of the path integral with ``steps`` intervals."""
    diff = x - baseline
    total = np.zeros_like(x)
    for start in range(0, steps, batch_size):
        k = np.arange(start, min(start + batch_size, steps))
        alphas = (k + 0.5) / steps
        pts = baseline[None] + alphas.reshape((-1,) + (1,) * diff.ndim) * diff[None]
        total += _batch_gradients(model, pts, q, target).sum(axis=0)
    return diff * total / steps


def integrated_gradients(model: Model, x, q, target: int, cfg: IGConfig = IGConfig()):
    """Returns (relevance, relative completeness error) using the first sufficient step count.

    Raises DiscardPoint when no step count in the schedule reaches the
    tolerance and DegenerateSpan when f_c(x) == f_c(x') for x != x'.
    """
    x = _check_input(model, x)
    base = ig_baseline(cfg, x.shape)
    if np.array_equal(base, x):
        return np.zeros_like(x), 0.0
    span = target_logit(model, x, q, target) - target_logit(model, base, q, target)
    if span == 0.0:
        raise DegenerateSpan("f_c(x) equals f_c(baseline)")
    err = np.inf
    for steps in cfg.step_schedule:
        r = ig_riemann(model, x, base, q, target, steps, cfg.batch_size)
        err = abs(r.sum() - span) / abs(span)
        if err < cfg.tolerance:
            return r, float(err)
    raise DiscardPoint(f"IG relative error {err:.4g} above tolerance {cfg.tolerance} at "
                       f"{cfg.step_schedule[-1]} steps")
