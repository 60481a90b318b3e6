"""Named methods, their variant grids and a single ``explain`` entry point."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..micronet.model import Model
from . import methods as m
from .lrp import EXCITATION_BACKPROP, INPUT_RULES, LRPConfig, lrp

NOISE_SIGMAS = (0.02, 0.05, 0.10, 0.20, 0.30)
NOISE_SAMPLES = (20, 50, 100, 300)


@dataclass(frozen=True)
class Variant:
    method: str
    params: tuple  # sorted (key, value) pairs

    @property
    def kwargs(self) -> dict:
        return dict(self.params)

    @property
    def name(self) -> str:
        if not self.params:
            return self.method
        return self.method + "[" + ",".join(f"{k}={_fmt(v)}" for k, v in self.params) + "]"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def _v(method: str, **params) -> Variant:
    return Variant(method, tuple(sorted(params.items())))


def variant(method: str, **params) -> Variant:
    """A checked variant: keys must occur in the method's grid, and keys whose
    grid values are all names only accept those names."""
    if method not in METHODS:
        raise KeyError(f"unknown method {method!r}")
    allowed: dict[str, set] = {}
    for g in METHODS[method].grid + (METHODS[method].best_mass, METHODS[method].best_rank):
        for k, v in g.params:
            allowed.setdefault(k, set()).add(v)
    for k, v in params.items():
        if k not in allowed:
            raise ValueError(f"{method} has no parameter {k!r}")
        names = allowed[k]
        if all(isinstance(a, str) for a in names) and v not in names:
            raise ValueError(f"{method} {k} must be one of {sorted(names)}, got {v!r}")
    return _v(method, **params)


def parse_variant(text: str) -> Variant:
    """Inverse of ``Variant.name``: ``method`` or ``method[k=v,...]``."""
    text = text.strip()
    if "[" not in text:
        return variant(text)
    if not text.endswith("]"):
        raise ValueError(f"malformed variant {text!r}")
    method, body = text[:-1].split("[", 1)
    params = {}
    for item in filter(None, body.split(",")):
        k, _, v = item.partition("=")
        params[k] = _parse_value(v)
    return variant(method, **params)


def _parse_value(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def _grid(method: str, **axes) -> list[Variant]:
    keys = sorted(axes)
    return [_v(method, **dict(zip(keys, vals))) for vals in itertools.product(*(axes[k] for k in keys))]


@dataclass(frozen=True)
class Context:
    """Per-call extras: the noise seed and the dataset mean image for IG baselines."""
    seed: int = 0
    mean_image: np.ndarray | None = None
    noise_batch: int = 1


def _gradient(model, x, q, c, ctx, squared=0):
    return m.gradient_attribution(model, x, q, c, squared=bool(squared))


def _gxi(model, x, q, c, ctx, squared=0):
    return m.gradient_attribution(model, x, q, c, squared=bool(squared), times_input=True)


def _smoothgrad(model, x, q, c, ctx, sigma=0.05, n=50, squared=0, times_input=0):
    cfg = m.NoiseConfig(sigma, n, ctx.seed, ctx.noise_batch)
    return m.smoothgrad(model, x, q, c, cfg, bool(squared), bool(times_input))


def _vargrad(model, x, q, c, ctx, sigma=0.05, n=50):
    return m.vargrad(model, x, q, c, m.NoiseConfig(sigma, n, ctx.seed, ctx.noise_batch))


def _deconvnet(model, x, q, c, ctx, scope="all"):
    return m.modified_backprop(model, x, q, c, "deconvnet", scope)


def _guided(model, x, q, c, ctx, scope="all"):
    return m.modified_backprop(model, x, q, c, "guided", scope)


def _grad_cam(model, x, q, c, ctx, layer="relu"):
    cam = m.grad_cam(model, x, q, c, layer)
    if cam.zero_flag:
        raise m.DiscardPoint("Grad-CAM heatmap is identically zero")
    return cam.upsampled


def _guided_grad_cam(model, x, q, c, ctx, layer="relu", scope="all"):
    return m.guided_grad_cam(model, x, q, c, layer, scope)


def _ig(model, x, q, c, ctx, baseline="mean_channels"):
    r, _ = m.integrated_gradients(model, x, q, c, m.IGConfig(baseline=baseline, mean_image=ctx.mean_image))
    return r


def _lrp_method(model, x, q, c, ctx, hidden="alphabeta", composite="none", input="box", merge_bn=0):
    cfg = LRPConfig(hidden_rule=hidden, composite=composite, input_rule=input, merge_batchnorm=bool(merge_bn))
    return lrp(model, x, q, c, cfg)


def _excitation(model, x, q, c, ctx):
    return lrp(model, x, q, c, EXCITATION_BACKPROP)


@dataclass(frozen=True)
class MethodSpec:
    fn: Callable
    grid: tuple
    best_mass: Variant
    best_rank: Variant
    pooling_mass: str
    pooling_rank: str

    @property
    def heatmap_2d(self) -> bool:
        return self.pooling_mass == "none"


METHODS: dict[str, MethodSpec] = {}


def _register(name, fn, grid, best_mass, best_rank, pool_mass="l2_norm_sq", pool_rank="max_norm"):
    METHODS[name] = MethodSpec(fn, tuple(grid), _v(name, **best_mass), _v(name, **best_rank),
                               pool_mass, pool_rank)


_LRP_PAIRS = (("epsilon", "none"), ("alphabeta", "none"), ("alphabeta", "classifier_epsilon"),
              ("alphabeta", "all_dense_epsilon"))

_register("gradient", _gradient, _grid("gradient", squared=(0, 1)), {"squared": 1}, {"squared": 0})
_register("gradient_x_input", _gxi, _grid("gradient_x_input", squared=(0, 1)), {"squared": 1}, {"squared": 1})
_register("smoothgrad", _smoothgrad,
          _grid("smoothgrad", sigma=NOISE_SIGMAS, n=NOISE_SAMPLES, squared=(0, 1), times_input=(0, 1)),
          {"sigma": 0.05, "n": 300, "squared": 1, "times_input": 0},
          {"sigma": 0.05, "n": 300, "squared": 0, "times_input": 0})
_register("vargrad", _vargrad, _grid("vargrad", sigma=NOISE_SIGMAS, n=NOISE_SAMPLES),
          {"sigma": 0.05, "n": 300}, {"sigma": 0.05, "n": 300})
_register("deconvnet", _deconvnet, _grid("deconvnet", scope=("all", "conv_only")), {"scope": "conv_only"},
          {"scope": "conv_only"}, pool_mass="pos_l2_norm_sq")
_register("guided_backprop", _guided, _grid("guided_backprop", scope=("all", "conv_only")), {"scope": "all"}, {"scope": "all"})
_register("grad_cam", _grad_cam, _grid("grad_cam", layer=("conv", "relu", "batchnorm")), {"layer": "batchnorm"},
          {"layer": "relu"}, pool_mass="none", pool_rank="none")
_register("guided_grad_cam", _guided_grad_cam,
          _grid("guided_grad_cam", layer=("conv", "relu", "batchnorm"), scope=("all", "conv_only")),
          {"layer": "relu", "scope": "all"}, {"layer": "relu", "scope": "all"})
_register("integrated_gradients", _ig, _grid("integrated_gradients", baseline=("zeros", "mean_image", "mean_channels")),
          {"baseline": "mean_channels"}, {"baseline": "mean_channels"}, pool_mass="pos_l2_norm_sq")
_LRP_BEST = {"hidden": "alphabeta", "composite": "none", "input": "box", "merge_bn": 0}
_register("lrp", _lrp_method,
          [_v("lrp", hidden=h, composite=c, input=i, merge_bn=mb)
           for h, c in _LRP_PAIRS for i in INPUT_RULES for mb in (0, 1)],
          _LRP_BEST, _LRP_BEST)
_register("excitation_backprop", _excitation, [_v("excitation_backprop")], {}, {})

METHOD_NAMES = tuple(METHODS)


def best_variant(method: str, metric: str = "mass") -> Variant:
    spec = METHODS[method]
    return spec.best_mass if metric == "mass" else spec.best_rank


def default_pooling(method: str, metric: str = "mass") -> str:
    spec = METHODS[method]
    return spec.pooling_mass if metric == "mass" else spec.pooling_rank


def explain(v: Variant, model: Model, x, q, target: int, ctx: Context = Context()) -> np.ndarray:
    """Raw relevance (C, H, W), or an (H, W) heatmap for Grad-CAM.

    Raises ``DiscardPoint`` when the method flags the input as unusable.
    """
    return METHODS[v.method].fn(model, x, q, target, ctx, **v.kwargs)
