"""Relation Network model: construction, traced forward pass and modified backward passes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..scene import ANSWERS
from .layers import BatchNorm, Conv2D, Dense, PairConcat, ReLU, ShapeMismatch, SumPool


class NonFiniteActivation(FloatingPointError):
    pass


class TraceMismatch(ValueError):
    pass


RELU_MODES = ("standard", "deconvnet", "guided")
RELU_SCOPES = ("all", "conv_only")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    conv_channels: tuple[int, ...] = (8, 8, 8, 8)
    strides: tuple[int, ...] = (2, 1, 2, 1)
    kernel_size: int | tuple[int, ...] = 3  # one size for every conv layer, or one per layer
    rn_hidden: tuple[int, ...] = (32, 32, 32, 32)
    classifier_hidden: tuple[int, ...] = (32, 32)
    n_answers: int = len(ANSWERS)
    question_dim: int = 16
    coords: bool = True
    bn_eps: float = 1e-5

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Layer sizes of the published CLEVR model (128x128 input)."""
        return cls(
            input_shape=(3, 128, 128),
            conv_channels=(24, 24, 24, 24),
            strides=(2, 2, 2, 2),
            rn_hidden=(256, 256, 256, 256),
            classifier_hidden=(256, 256),
            question_dim=128,
        )


class QuestionEncoder:
    """Sum of learned token embeddings (one row per program token)."""

    def __init__(self, vocab: Sequence[str], table: np.ndarray):
        self.vocab = list(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        self.table = np.asarray(table, dtype=float)
        if self.table.shape[0] != len(self.vocab):
            raise ShapeMismatch("embedding table rows must match vocabulary size")

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def token_ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index[t] for t in tokens if t in self.index]

    def encode_ids(self, ids: Sequence[int]) -> np.ndarray:
        if not ids:
            return np.zeros(self.dim)
        return self.table[list(ids)].sum(axis=0)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return self.encode_ids(self.token_ids(tokens))


@dataclass(eq=False)
class Model:
    layers: list
    input_shape: tuple[int, int, int]
    encoder: QuestionEncoder | None = None

    @property
    def question_dim(self) -> int:
        return self.pair_layer.question_dim if self.pair_index is not None else 0

    @property
    def pair_index(self) -> int | None:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, PairConcat):
                return i
        return None

    @property
    def pair_layer(self) -> PairConcat:
        return self.layers[self.pair_index]

    @property
    def n_outputs(self) -> int:
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape[-1]

    def conv_block_indices(self) -> list[int]:
        """Indices of layers in the CNN part (before pairing)."""
        stop = self.pair_index if self.pair_index is not None else len(self.layers)
        return list(range(stop))

    def last_conv_block(self) -> dict[str, int]:
        """Layer indices of the final conv -> relu -> batchnorm block."""
        cnn = self.conv_block_indices()
        convs = [i for i in cnn if isinstance(self.layers[i], Conv2D)]
        if not convs:
            return {}
        out = {"conv": convs[-1]}
        for i in cnn[cnn.index(convs[-1]) + 1:]:
            kind = self.layers[i].kind
            if kind in ("relu", "batchnorm") and kind not in out:
                out[kind] = i
        return out

    def dense_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Dense)]

    def parameters(self) -> list[tuple[int, str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out.append((i, name, arr))
        if self.encoder is not None:
            out.append((-1, "embedding", self.encoder.table))
        return out

    def set_training(self, flag: bool) -> None:
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                layer.training = flag

    def encode_question(self, tokens: Iterable[str]) -> np.ndarray:
        if self.encoder is None:
            return np.zeros(self.question_dim)
        return self.encoder.encode(tokens)


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0,
                vocab: Sequence[str] | None = None) -> Model:
    """He-initialised Relation Network with zero biases and identity batchnorm."""
    rng = np.random.default_rng(seed)
    layers: list = []
    c = config.input_shape[0]
    kernels = config.kernel_size
    if isinstance(kernels, int):
        kernels = (kernels,) * len(config.conv_channels)
    if len(kernels) != len(config.conv_channels):
        raise ShapeMismatch("need one kernel size per conv layer")
    for width, stride, k in zip(config.conv_channels, config.strides, kernels):
        w = rng.normal(0.0, np.sqrt(2.0 / (c * k * k)), size=(width, c, k, k))
        layers += [
            Conv2D(w, np.zeros(width), stride),
            ReLU(),
            BatchNorm(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), eps=config.bn_eps),
        ]
        c = width
    pair = PairConcat(config.question_dim, config.coords)
    shape = tuple(config.input_shape)
    for layer in layers:
        shape = layer.out_shape(shape)
    n_pairs = pair.out_shape(shape)[0]
    layers.append(pair)
    d = 2 * (c + pair.n_coords) + config.question_dim

    def dense(n_in, n_out):
        return Dense(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)), np.zeros(n_out))

    for width in config.rn_hidden:
        layers += [dense(d, width), ReLU()]
        d = width
    layers.append(SumPool())
    for k, width in enumerate(config.classifier_hidden):
        layer = dense(d, width)
        if k == 0:
            layer.weight /= n_pairs  # the pooled sum grows with the number of pairs
        layers += [layer, ReLU()]
        d = width
    layers.append(dense(d, config.n_answers))
    encoder = None
    if vocab is not None:
        encoder = QuestionEncoder(vocab, rng.normal(0.0, 0.5, size=(len(vocab), config.question_dim)))
    model = Model(layers, tuple(config.input_shape), encoder)
    model.n_outputs  # validates the layer chain
    return model


@dataclass(eq=False)
class ForwardTrace:
    """Per-layer inputs/outputs of one (batched) forward pass."""
    model_token: int
    inputs: list
    outputs: list
    caches: list
    batched: bool
    x: np.ndarray
    q: np.ndarray | None

    @property
    def logits(self) -> np.ndarray:
        out = self.outputs[-1]
        return out if self.batched else out[0]


def _as_batch(model: Model, x, q):
    x = np.asarray(x, dtype=float)
    batched = x.ndim == len(model.input_shape) + 1
    if not batched:
        x = x[None]
    if x.shape[1:] != tuple(model.input_shape):
        raise ShapeMismatch(f"input shape {x.shape[1:]} != model input {tuple(model.input_shape)}")
    if model.pair_index is not None:
        if q is None:
            q = np.zeros(model.question_dim)
        q = np.asarray(q, dtype=float)
        if q.ndim == 1:
            q = np.broadcast_to(q, (x.shape[0], q.shape[0]))
        if q.shape != (x.shape[0], model.question_dim):
            raise ShapeMismatch(f"question embedding shape {q.shape} incompatible with batch {x.shape[0]}")
    return x, q, batched


def forward(model: Model, x, q=None, check_finite: bool = True):
    """Run the model; ``x`` is (C, H, W) or (B, C, H, W), ``q`` is (D,) or (B, D).

    Returns (logits, trace); logits are (n_answers,) or (B, n_answers).
    """
    x, q, batched = _as_batch(model, x, q)
    inputs, outputs, caches = [], [], []
    h = x
    for layer in model.layers:
        inputs.append(h)
        if isinstance(layer, PairConcat):
            h, cache = layer.forward(h, q)
        else:
            h, cache = layer.forward(h)
        outputs.append(h)
        caches.append(cache)
    if check_finite and not np.all(np.isfinite(h)):
        raise NonFiniteActivation("non-finite logits")
    trace = ForwardTrace(id(model), inputs, outputs, caches, batched, x, q)
    return trace.logits, trace


def _relu_mode_at(model: Model, i: int, relu_mode: str, relu_scope: str) -> str:
    if relu_scope == "all":
        return relu_mode
    if relu_scope == "conv_only":
        return relu_mode if i in model.conv_block_indices() else "standard"
    raise ValueError(f"unknown relu scope {relu_scope!r}")


def propagate(model: Model, trace: ForwardTrace, grad, stop: int = 0,
              relu_mode: str = "standard", relu_scope: str = "all") -> np.ndarray:
    """Push ``grad`` (w.r.t. the logits) back to the input of layer ``stop``."""
    if trace.model_token != id(model) or len(trace.caches) != len(model.layers):
        raise TraceMismatch("trace was not produced by this model")
    if relu_mode not in RELU_MODES:
        raise ValueError(f"unknown relu mode {relu_mode!r}")
    g = np.asarray(grad, dtype=float)
    for i in range(len(model.layers) - 1, stop - 1, -1):
        layer = model.layers[i]
        if isinstance(layer, ReLU):
            g = layer.backward(g, trace.caches[i], _relu_mode_at(model, i, relu_mode, relu_scope))
        else:
            g = layer.backward(g, trace.caches[i])
    return g


def _target_grad(trace: ForwardTrace, target_class) -> np.ndarray:
    out = trace.outputs[-1]
    g = np.zeros_like(out)
    cls = np.broadcast_to(np.asarray(target_class), (out.shape[0],))
    if np.any(cls < 0) or np.any(cls >= out.shape[1]):
        raise ValueError(f"target class {target_class} out of range")
    g[np.arange(out.shape[0]), cls] = 1.0
    return g


def backward(model: Model, trace: ForwardTrace, target_class, relu_mode: str = "standard",
             relu_scope: str = "all") -> np.ndarray:
    """Gradient-like map of logit ``target_class`` w.r.t. the input image.

    ``relu_mode`` changes the rule at ReLUs inside ``relu_scope``: ``standard``
    is the true derivative, ``deconvnet`` passes ReLU(upstream), ``guided``
    passes ReLU(mask * upstream). ReLUs outside the scope stay standard.
    """
    g = propagate(model, trace, _target_grad(trace, target_class), 0, relu_mode, relu_scope)
    return g if trace.batched else g[0]


def layer_gradient(model: Model, trace: ForwardTrace, target_class, layer_index: int,
                   relu_mode: str = "standard", relu_scope: str = "all") -> np.ndarray:
    """Gradient of the target logit w.r.t. the output of ``layer_index``."""
    g = propagate(model, trace, _target_grad(trace, target_class), layer_index + 1, relu_mode, relu_scope)
    return g if trace.batched else g[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: Model, x, q=None) -> tuple:
    """(argmax class, softmax probability of that class)."""
    logits, _ = forward(model, x, q)
    p = softmax(logits)
    cls = np.argmax(logits, axis=-1)
    if np.ndim(cls) == 0:
        return int(cls), float(p[cls])
    return cls, p[np.arange(len(cls)), cls]


def merge_batchnorm(model: Model) -> Model:
    """Equivalent model with every inference-mode batchnorm folded into the next linear layer.

    Handles batchnorm -> conv and batchnorm -> pairing -> dense (both object slots).
    """
    layers = list(model.layers)
    out: list = []
    pending = None  # (scale, shift) waiting for the next linear layer
    for layer in layers:
        if isinstance(layer, BatchNorm):
            if pending is not None:
                raise ValueError("consecutive batchnorm layers are not supported")
            pending = layer.scale_shift()
            continue
        if pending is None:
            out.append(layer)
            continue
        a, b = pending[:2]
        if isinstance(layer, Conv2D):
            w = layer.weight * a[None, :, None, None]
            bias = layer.bias + np.einsum("kcij,c->k", layer.weight, b)
            out.append(Conv2D(w, bias, layer.stride))
            pending = None
        elif isinstance(layer, PairConcat):
            out.append(layer)
            pending = (a, b, layer)
        elif isinstance(layer, Dense) and len(pending) == 3:
            pair = pending[2]
            k = len(a)
            d = k + pair.n_coords
            w = layer.weight.copy()
            bias = layer.bias.copy()
            for start in (0, d):
                rows = slice(start, start + k)
                bias = bias + b @ layer.weight[rows]
                w[rows] = layer.weight[rows] * a[:, None]
            out.append(Dense(w, bias))
            pending = None
        elif isinstance(layer, Dense):
            out.append(Dense(layer.weight * a[:, None], layer.bias + b @ layer.weight))
            pending = None
        elif isinstance(layer, ReLU):
            raise ValueError("cannot fold batchnorm across a ReLU")
        else:
            raise ValueError(f"cannot fold batchnorm into {layer.kind}")
    if pending is not None:
        raise ValueError("trailing batchnorm has no linear layer to fold into")
    return Model(out, model.input_shape, model.encoder)
