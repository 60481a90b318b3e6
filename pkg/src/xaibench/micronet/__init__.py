"""Minimal numpy network engine with traced forward and custom backward passes."""
from .io import BadMagic, CorruptPayload, VersionMismatch, load_model, save_model
from .layers import BatchNorm, Conv2D, Dense, PairConcat, ReLU, ShapeMismatch, SumPool
from .model import (
    ForwardTrace,
    Model,
    ModelConfig,
    NonFiniteActivation,
    QuestionEncoder,
    TraceMismatch,
    backward,
    build_model,
    forward,
    layer_gradient,
    merge_batchnorm,
    predict,
    propagate,
    softmax,
)
