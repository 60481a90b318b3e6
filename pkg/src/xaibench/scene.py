"""Scene graphs: attribute vocabulary, objects and their JSON records."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
MATERIALS = ("rubber", "metal")
SIZES = ("small", "large")
SHAPES = ("cube", "sphere", "cylinder")

ATTRIBUTES = {
    "color": COLORS,
    "material": MATERIALS,
    "size": SIZES,
    "shape": SHAPES,
}

RELATIONS = ("left", "right", "front", "behind")

# numbers 0-10, yes/no, then the 15 attribute values
ANSWERS = (
    tuple(str(i) for i in range(11))
    + ("yes", "no")
    + COLORS
    + MATERIALS
    + SIZES
    + SHAPES
)
ANSWER_INDEX = {a: i for i, a in enumerate(ANSWERS)}

MIN_OBJECTS = 3
MAX_OBJECTS = 10


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: int
    color: int
    material: int
    size: int
    position: tuple[float, float]  # (x, y) in native pixel coordinates
    mask_ref: str = ""

    def attribute(self, name: str) -> int:
        return getattr(self, name)

    def attribute_name(self, name: str) -> str:
        return ATTRIBUTES[name][getattr(self, name)]

    def describe(self) -> str:
        return " ".join(self.attribute_name(a) for a in ("size", "color", "material", "shape"))


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple[SceneObject, ...]
    image_size: tuple[int, int]  # (H, W)
    image_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        h, w = self.image_size
        for k, obj in enumerate(self.objects):
            if obj.id != k:
                raise SceneError(f"object ids must be 0..n-1, got {obj.id} at position {k}")
            for name, values in ATTRIBUTES.items():
                v = obj.attribute(name)
                if not 0 <= v < len(values):
                    raise SceneError(f"object {k}: {name} index {v} out of range")
            x, y = obj.position
            if not (0 <= x < w and 0 <= y < h):
                raise SceneError(f"object {k}: position {obj.position} outside {w}x{h} image")

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(o.id for o in self.objects)

    def validate_generated(self) -> None:
        """Generated scenes carry between 3 and 10 objects."""
        if not MIN_OBJECTS <= len(self.objects) <= MAX_OBJECTS:
            raise SceneError(
                f"generated scenes need {MIN_OBJECTS}..{MAX_OBJECTS} objects, got {len(self.objects)}"
            )


def make_object(id: int, size: str, color: str, material: str, shape: str,
                position: Sequence[float], mask_ref: str | None = None) -> SceneObject:
    """Build an object from attribute names."""
    try:
        return SceneObject(
            id=id,
            shape=SHAPES.index(shape),
            color=COLORS.index(color),
            material=MATERIALS.index(material),
            size=SIZES.index(size),
            position=(float(position[0]), float(position[1])),
            mask_ref=mask_ref if mask_ref is not None else f"obj{id}",
        )
    except ValueError as exc:
        raise SceneError(str(exc)) from None


def random_scene(rng: np.random.Generator, image_size: tuple[int, int],
                 n_objects: int | None = None, image_index: int = 0,
                 margin: float = 4.0, min_dist: float = 6.0,
                 max_tries: int = 200) -> SceneGraph:
    """Sample 3-10 objects with random attributes and non-coincident positions.

    Positions are drawn uniformly inside the image minus ``margin`` and kept at
    least ``min_dist`` apart; occlusion is still possible for large objects.
    """
    h, w = image_size
    if n_objects is None:
        n_objects = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    positions: list[tuple[float, float]] = []
    tries = 0
    while len(positions) < n_objects:
        tries += 1
        if tries > max_tries * n_objects:
            raise SceneError("could not place objects")
        x = float(rng.uniform(margin, w - margin))
        y = float(rng.uniform(margin, h - margin))
        if all((x - px) ** 2 + (y - py) ** 2 >= min_dist ** 2 for px, py in positions):
            positions.append((round(x, 2), round(y, 2)))
    objects = []
    for k, pos in enumerate(positions):
        objects.append(SceneObject(
            id=k,
            shape=int(rng.integers(len(SHAPES))),
            color=int(rng.integers(len(COLORS))),
            material=int(rng.integers(len(MATERIALS))),
            size=int(rng.integers(len(SIZES))),
            position=pos,
            mask_ref=f"{image_index}:{k}",
        ))
    return SceneGraph(tuple(objects), (h, w), image_index)


def scene_to_record(scene: SceneGraph) -> dict:
    return {
        "image_index": scene.image_index,
        "image_size": list(scene.image_size),
        "objects": [
            {
                "id": o.id,
                "shape": SHAPES[o.shape],
                "color": COLORS[o.color],
                "material": MATERIALS[o.material],
                "size": SIZES[o.size],
                "position": list(o.position),
                "mask_ref": o.mask_ref,
            }
            for o in scene.objects
        ],
    }


def scene_from_record(record: dict) -> SceneGraph:
    try:
        objects = tuple(
            make_object(o["id"], o["size"], o["color"], o["material"], o["shape"],
                        o["position"], o.get("mask_ref"))
            for o in record["objects"]
        )
        return SceneGraph(objects, tuple(record["image_size"]), record.get("image_index", 0))
    except KeyError as exc:
        raise SceneError(f"scene record missing field {exc}") from None


def load_scenes(path) -> list[SceneGraph]:
    """Read scenes from a JSON array file or a newline-delimited JSON file."""
    return [scene_from_record(r) for r in read_records(path)]


def save_scenes(scenes: Iterable[SceneGraph], path) -> None:
    with open(path, "w") as f:
        json.dump([scene_to_record(s) for s in scenes], f, separators=(",", ":"))


def read_records(path) -> list[dict]:
    with open(path) as f:
        text = f.read()
    stripped = text.lstrip()
    if stripped.startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]
