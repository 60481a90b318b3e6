"""Explanation methods producing per-input-variable relevance."""
from .lrp import EXCITATION_BACKPROP, LRPConfig, LRPTrace, UnsupportedLayer, layer_rules, lrp
from .methods import (
    DegenerateSpan,
    DiscardPoint,
    GradCamIntermediate,
    IGConfig,
    LayerNotFound,
    NoiseConfig,
    grad_cam,
    gradcam_from_maps,
    gradcam_heatmap,
    gradient_attribution,
    guided_grad_cam,
    ig_baseline,
    ig_riemann,
    integrated_gradients,
    modified_backprop,
    noisy_gradients,
    smoothgrad,
    vargrad,
)
from .registry import (
    METHOD_NAMES,
    METHODS,
    Context,
    Variant,
    best_variant,
    default_pooling,
    explain,
    parse_variant,
    variant,
)
