"""Flat 2D scene rendering, per-object bit masks, bilinear resizing and RLE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .scene import COLORS, SceneGraph

# CLEVR palette, 0-255
PALETTE = {
    "gray": (87, 87, 87),
    "red": (173, 35, 35),
    "blue": (42, 75, 215),
    "green": (29, 105, 20),
    "brown": (129, 74, 25),
    "purple": (129, 38, 192),
    "cyan": (41, 208, 208),
    "yellow": (255, 238, 51),
}
BACKGROUND = (0.6, 0.6, 0.6)
METAL_SHINE = 0.45  # blend toward white inside the highlight region


@dataclass(frozen=True)
class ShapeGeometry:
    """Half-extents (in native pixels) per size and the inside test per shape."""
    half_size: tuple[float, float] = (5.0, 8.0)  # small, large
    cylinder_aspect: float = 0.55
    highlight_fraction: float = 0.5

    def inside(self, shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
        if shape == "cube":
            return (np.abs(dx) <= r) & (np.abs(dy) <= r)
        if shape == "sphere":
            return dx * dx + dy * dy <= r * r
        if shape == "cylinder":
            return (np.abs(dx) <= self.cylinder_aspect * r) & (np.abs(dy) <= r)
        raise ValueError(f"unknown shape {shape!r}")


DEFAULT_GEOMETRY = ShapeGeometry()


class MaskError(ValueError):
    pass


class DegenerateObject(MaskError):
    pass


class UnknownObjectId(MaskError):
    pass


class EmptyCollection(MaskError):
    pass


@dataclass(frozen=True, eq=False)
class BitMask:
    bits: np.ndarray  # (H, W) bool, read-only

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise MaskError(f"mask must be 2D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __or__(self, other: "BitMask") -> "BitMask":
        return BitMask(self.bits | other.bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, BitMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))

    def issubset(self, other: "BitMask") -> bool:
        return not np.any(self.bits & ~other.bits)

    @classmethod
    def empty(cls, height: int, width: int) -> "BitMask":
        return cls(np.zeros((height, width), dtype=bool))

    def to_record(self) -> dict:
        return {"height": self.height, "width": self.width, "rle": rle_encode(self.bits)}

    @classmethod
    def from_record(cls, record: Mapping) -> "BitMask":
        return cls(rle_decode(record["rle"], record["height"], record["width"]))


def rle_encode(bits: np.ndarray) -> list[int]:
    """Run lengths of the row-major flattening, starting with a False run (possibly 0)."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != height * width or np.any(runs < 0):
        raise MaskError(f"RLE runs sum to {runs.sum()}, expected {height * width}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


ObjectMaskStore = dict  # object id -> BitMask


def rasterize_scene(scene: SceneGraph, geometry: ShapeGeometry = DEFAULT_GEOMETRY
                    ) -> tuple[dict[int, BitMask], np.ndarray]:
    """Paint objects back to front (ascending y, later id wins ties).

    Returns the per-object masks at native resolution and a (3, H, W) float
    image in [0, 1] on a flat gray background.
    """
    h, w = scene.image_size
    ys, xs = np.mgrid[0:h, 0:w]
    yc, xc = ys + 0.5, xs + 0.5
    image = np.empty((3, h, w))
    image[:] = np.asarray(BACKGROUND)[:, None, None]
    owner = np.full((h, w), -1, dtype=np.int64)
    order = sorted(scene.objects, key=lambda o: (o.position[1], o.id))
    for obj in order:
        r = geometry.half_size[obj.size]
        dx, dy = xc - obj.position[0], yc - obj.position[1]
        shape = obj.attribute_name("shape")
        body = geometry.inside(shape, dx, dy, r)
        color = np.asarray(PALETTE[COLORS[obj.color]], dtype=float) / 255.0
        image[:, body] = color[:, None]
        if obj.attribute_name("material") == "metal":
            shine = body & geometry.inside(shape, dx, dy, r * geometry.highlight_fraction)
            image[:, shine] = (color * (1 - METAL_SHINE) + METAL_SHINE)[:, None]
        owner[body] = obj.id
    store = {}
    for obj in scene.objects:
        bits = owner == obj.id
        if not bits.any():
            raise DegenerateObject(f"object {obj.id} is fully occluded")
        store[obj.id] = BitMask(bits)
    return store, image


def union_mask(ids: Iterable[int], store: Mapping[int, BitMask], shape: tuple[int, int] | None = None
               ) -> BitMask:
    ids = list(ids)
    if shape is None:
        shape = next(iter(store.values())).shape
    bits = np.zeros(shape, dtype=bool)
    for i in ids:
        if i not in store:
            raise UnknownObjectId(f"object {i} has no mask")
        bits |= store[i].bits
    return BitMask(bits)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights of 1D linear interpolation with half-pixel centres.

    Source coordinate of output ``o`` is ``(o + 0.5) * n_in / n_out - 0.5``,
    clamped to the valid range (edge replication).
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a (..., H, W) array to (..., H', W')."""
    h, w = image.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return np.array(image, dtype=float)
    mh = bilinear_matrix(h, th)
    mw = bilinear_matrix(w, tw)
    return mh @ np.asarray(image, dtype=float) @ mw.T


def resize_mask(mask: BitMask, size: tuple[int, int]) -> BitMask:
    """Resize as a 0/1 image, then mark every pixel with a non-zero value."""
    if size[0] < 1 or size[1] < 1:
        raise ValueError("target size must be >= 1")
    return BitMask(resize_image(mask.bits.astype(float), size) > 0)


def _summary(values: np.ndarray) -> dict:
    return {
        "min": float(values.min()),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "std": float(values.std()),
    }


def mask_stats(masks: Sequence[BitMask], object_counts: Sequence[int] | None = None) -> dict:
    """min/max/mean/std of pixel counts (and of object counts when given)."""
    if len(masks) == 0:
        raise EmptyCollection("no masks")
    out = {"count": len(masks), "pixels": _summary(np.array([m.pixel_count for m in masks], dtype=float))}
    if object_counts is not None:
        if len(object_counts) != len(masks):
            raise ValueError("object_counts must align with masks")
        out["objects"] = _summary(np.asarray(object_counts, dtype=float))
    return out
