"""Channel pooling of raw relevance and the mass / rank accuracy scores."""
from __future__ import annotations

import statistics
from typing import Sequence

import numpy as np

from .masks import BitMask


class EmptyGT(ValueError):
    pass


class ZeroHeatmap(ValueError):
    """The heatmap has no mass; the score is undefined and the point should be discarded."""


class EmptyInput(ValueError):
    pass


def _pos(r):
    return np.maximum(r, 0.0)


POOLINGS = {
    "sum_pos": lambda r: _pos(r.sum(axis=0)),
    "sum_abs": lambda r: np.abs(r.sum(axis=0)),
    "l1_norm": lambda r: np.abs(r).sum(axis=0),
    "max_norm": lambda r: np.abs(r).max(axis=0),
    "l2_norm": lambda r: np.sqrt((r * r).sum(axis=0)),
    "l2_norm_sq": lambda r: (r * r).sum(axis=0),
    "pos_sum": lambda r: _pos(r).sum(axis=0),
    "pos_max_norm": lambda r: _pos(r).max(axis=0),
    "pos_l2_norm": lambda r: np.sqrt((_pos(r) ** 2).sum(axis=0)),
    "pos_l2_norm_sq": lambda r: (_pos(r) ** 2).sum(axis=0),
}
POOLING_NAMES = tuple(POOLINGS)
NO_POOLING = "none"  # for methods that already return an (H, W) heatmap


def canonical_pooling(name: str) -> str:
    """Accept both ``pos_l2_norm_sq`` and the ``pos,l2-norm-sq`` spelling."""
    key = name.strip().replace(",", "_").replace("-", "_")
    if key != NO_POOLING and key not in POOLINGS:
        raise KeyError(f"unknown pooling {name!r}")
    return key


def pool(r: np.ndarray, technique: str) -> np.ndarray:
    """Collapse (C, H, W) relevance to a non-negative (H, W) heatmap."""
    key = canonical_pooling(technique)
    r = np.asarray(r, dtype=float)
    if key == NO_POOLING:
        if r.ndim != 2:
            raise ValueError("pooling 'none' expects an (H, W) heatmap")
        return r
    if r.ndim != 3 or r.shape[0] < 1:
        raise ValueError(f"expected (C, H, W) relevance, got shape {r.shape}")
    return POOLINGS[key](r)


def _prepare(h, gt):
    h = np.asarray(h, dtype=float)
    bits = gt.bits if isinstance(gt, BitMask) else np.asarray(gt, dtype=bool)
    if h.shape != bits.shape:
        raise ValueError(f"heatmap {h.shape} and mask {bits.shape} differ in shape")
    if not bits.any():
        raise EmptyGT("ground-truth mask is empty")
    if not np.all(np.isfinite(h)) or np.any(h < 0):
        raise ValueError("heatmap must be finite and non-negative")
    return h, bits


def mass_accuracy(h, gt) -> float:
    h, bits = _prepare(h, gt)
    inside = h[bits].sum()
    total = inside + h[~bits].sum()  # exactly 1.0 when nothing lies outside
    if total == 0:
        raise ZeroHeatmap("heatmap sums to zero")
    return float(min(inside / total, 1.0))


def top_k(h, k: int) -> np.ndarray:
    """Row-major indices of the ``k`` largest values; ties go to the smaller index."""
    flat = np.asarray(h, dtype=float).ravel()
    order = np.argsort(-flat, kind="stable")
    return order[:k]


def rank_accuracy(h, gt) -> float:
    h, bits = _prepare(h, gt)
    if not h.any():
        raise ZeroHeatmap("heatmap is identically zero")
    k = int(bits.sum())
    hits = bits.ravel()[top_k(h, k)].sum()
    return float(hits / k)


METRICS = {"mass": mass_accuracy, "rank": rank_accuracy}


def aggregate(scores: Sequence[float]) -> dict:
    """Mean, population std, lower median and count."""
    values = [float(s) for s in scores]
    if not values:
        raise EmptyInput("no scores to aggregate")
    return {
        "mean": statistics.fmean(values),
        "std": statistics.pstdev(values),
        "median": statistics.median_low(values),
        "count": len(values),
    }
