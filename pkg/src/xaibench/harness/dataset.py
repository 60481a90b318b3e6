"""Toy dataset generation and loading.

Directory layout::

    manifest.json      counts, parameters, paths and summary statistics
    scenes.json        scene records
    masks.json         native-resolution object masks keyed by mask_ref (RLE)
    questions.json     question records with programs, answers and GT masks
    images/NNNNN.bin   model-input images (planar f32 tensor files)
    mean_image.bin     pixel-wise mean image over the dataset
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import tensorio
from ..masks import (
    DEFAULT_GEOMETRY,
    BitMask,
    DegenerateObject,
    mask_stats,
    rasterize_scene,
    resize_image,
    resize_mask,
    ShapeGeometry,
    union_mask,
)
from ..program import GT_KINDS, derive_gts, evaluate, parse_program
from ..questions import QUERY_ATTRS, GenerationExhausted, instantiate_questions
from ..scene import MAX_OBJECTS, MIN_OBJECTS, SceneGraph, random_scene, scene_from_record, scene_to_record


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class DatasetParams:
    n_scenes: int = 200
    image_size: tuple[int, int] = (32, 32)
    native_size: tuple[int, int] = (64, 64)
    simple_per_scene: int = 4
    complex_per_scene: int = 6
    min_visible_fraction: float = 0.35
    object_range: tuple[int, int] = (MIN_OBJECTS, MAX_OBJECTS)  # inclusive
    geometry: ShapeGeometry = DEFAULT_GEOMETRY
    simple_types: tuple[str, ...] = QUERY_ATTRS  # attributes simple questions ask about

    def __post_init__(self):
        lo, hi = self.object_range
        if not MIN_OBJECTS <= lo <= hi <= MAX_OBJECTS:
            raise ValueError(f"object_range must lie within [{MIN_OBJECTS}, {MAX_OBJECTS}]")
        if self.n_scenes < 1 or min(self.image_size) < 1 or min(self.native_size) < 1:
            raise ValueError("dataset parameters must be positive")
        if not self.simple_types or not set(self.simple_types) <= set(QUERY_ATTRS):
            raise ValueError(f"simple_types must be a non-empty subset of {QUERY_ATTRS}")
        if self.simple_per_scene < 0 or self.complex_per_scene < 0:
            raise ValueError("question counts must be non-negative")


def _visible_enough(scene: SceneGraph, store: dict[int, BitMask], min_fraction: float,
                    geometry: ShapeGeometry) -> bool:
    for obj in scene.objects:
        alone, _ = rasterize_scene(SceneGraph((replace(obj, id=0),), scene.image_size), geometry)
        if store[obj.id].pixel_count < min_fraction * alone[0].pixel_count:
            return False
    return True


def render_scene(seed: int, index: int, params: DatasetParams, max_tries: int = 100):
    """Sample and rasterise scene ``index``; resample until no object is (nearly) hidden."""
    rng = np.random.default_rng([seed, index])
    for _ in range(max_tries):
        lo, hi = params.object_range
        scene = random_scene(rng, params.native_size, int(rng.integers(lo, hi + 1)), image_index=index)
        try:
            store, image = rasterize_scene(scene, params.geometry)
        except DegenerateObject:
            continue
        if _visible_enough(scene, store, params.min_visible_fraction, params.geometry):
            return scene, store, image
    raise RuntimeError(f"could not render scene {index}")


def _gt_record(ids, store, image_size) -> dict:
    if ids is None:
        return {"status": "undefined"}
    if not ids:
        return {"status": "empty", "objects": []}
    mask = resize_mask(union_mask(sorted(ids), store), image_size)
    return {"status": "ok", "objects": sorted(ids), "mask": mask.to_record()}


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, separators=(",", ":"), sort_keys=True)


def generate_dataset(params: DatasetParams, seed: int, out_dir) -> dict:
    """Write a complete dataset under ``out_dir`` and return its manifest."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    scenes, mask_records, questions = [], {}, []
    image_sum = np.zeros((3,) + tuple(params.image_size))
    try:
        for i in range(params.n_scenes):
            scene, store, native = render_scene(seed, i, params)
            image = np.clip(resize_image(native, params.image_size), 0.0, 1.0)
            image = image.astype(np.float32).astype(np.float64)  # what the file stores
            tensorio.save_tensor(out / "images" / f"{i:05d}.bin", image)
            image_sum += image
            scenes.append(scene_to_record(scene))
            for obj in scene.objects:
                mask_records[obj.mask_ref] = store[obj.id].to_record()
            for kind, n in (("simple", params.simple_per_scene), ("complex", params.complex_per_scene)):
                if n == 0:
                    continue
                try:
                    qs = instantiate_questions(scene, kind, n, seed=hash_seed(seed, i, kind),
                                               query_attrs=params.simple_types)
                except GenerationExhausted:
                    continue
                for program, answer in qs:
                    trace = evaluate(program, scene)
                    gts = derive_gts(trace, scene)
                    if kind == "complex":
                        gts["single_object"] = None
                    else:
                        gts = {"single_object": gts["single_object"], "all_objects": gts["all_objects"]}
                    questions.append({
                        "question_index": len(questions),
                        "image_index": i,
                        "kind": kind,
                        "question_text": program.question_text,
                        "family": program.family,
                        "question_type": program.question_type,
                        "program": program.to_records(),
                        "answer": answer,
                        "gt": {k: _gt_record(v, store, params.image_size) for k, v in gts.items()},
                    })
        mean_image = image_sum / params.n_scenes
        tensorio.save_tensor(out / "mean_image.bin", mean_image)
        _write_json(out / "scenes.json", scenes)
        _write_json(out / "masks.json", mask_records)
        _write_json(out / "questions.json", questions)
        manifest = {
            "format": "xaibench-dataset/1",
            "seed": seed,
            "params": {
                "n_scenes": params.n_scenes,
                "image_size": list(params.image_size),
                "native_size": list(params.native_size),
                "simple_per_scene": params.simple_per_scene,
                "complex_per_scene": params.complex_per_scene,
                "min_visible_fraction": params.min_visible_fraction,
                "object_range": list(params.object_range),
                "simple_types": list(params.simple_types),
                "geometry": {
                    "half_size": list(params.geometry.half_size),
                    "cylinder_aspect": params.geometry.cylinder_aspect,
                    "highlight_fraction": params.geometry.highlight_fraction,
                },
            },
            "paths": {
                "scenes": "scenes.json",
                "masks": "masks.json",
                "questions": "questions.json",
                "images": "images",
                "mean_image": "mean_image.bin",
            },
            "counts": {
                "scenes": len(scenes),
                "images": len(scenes),
                "object_masks": len(mask_records),
                "simple_questions": sum(q["kind"] == "simple" for q in questions),
                "complex_questions": sum(q["kind"] == "complex" for q in questions),
            },
            "stats": dataset_stats(questions, scenes),
        }
        _write_json(out / "manifest.json", manifest)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest


def hash_seed(seed: int, index: int, kind: str) -> int:
    """Stable per-(scene, kind) seed, independent of PYTHONHASHSEED."""
    return int(np.random.SeedSequence([seed, index, 0 if kind == "simple" else 1]).generate_state(1)[0])


def dataset_stats(questions: list[dict], scenes: list[dict]) -> dict:
    stats: dict = {}
    for kind in ("simple", "complex"):
        qs = [q for q in questions if q["kind"] == kind]
        if not qs:
            continue
        lengths = np.array([len(q["program"]) for q in qs], dtype=float)
        entry = {
            "questions": len(qs),
            "program_length": {
                "min": float(lengths.min()), "max": float(lengths.max()),
                "mean": float(lengths.mean()), "std": float(lengths.std()),
            },
            "gt": {},
        }
        for gt in GT_KINDS:
            recs = [q["gt"][gt] for q in qs if gt in q["gt"] and q["gt"][gt]["status"] == "ok"]
            if recs:
                masks = [BitMask.from_record(r["mask"]) for r in recs]
                entry["gt"][gt] = mask_stats(masks, [len(r["objects"]) for r in recs])
        stats[kind] = entry
    return stats


@dataclass
class Question:
    index: int
    image_index: int
    kind: str
    program: object
    answer: str
    gt: dict
    record: dict = field(repr=False)

    @property
    def question_type(self) -> str:
        return self.program.question_type

    def gt_mask(self, kind: str) -> BitMask | None:
        """GT mask of the given kind; None when undefined, empty or absent."""
        rec = self.gt.get(kind)
        if rec is None or rec["status"] != "ok":
            return None
        return BitMask.from_record(rec["mask"])

    def gt_status(self, kind: str) -> str:
        rec = self.gt.get(kind)
        return "absent" if rec is None else rec["status"]


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            with open(self.root / "manifest.json") as f:
                self.manifest = json.load(f)
            with open(self.root / "scenes.json") as f:
                self.scenes = [scene_from_record(r) for r in json.load(f)]
            with open(self.root / "questions.json") as f:
                records = json.load(f)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self.questions = [
            Question(r["question_index"], r["image_index"], r["kind"], parse_program(r), r["answer"], r["gt"], r)
            for r in records
        ]
        self._images: dict[int, np.ndarray] = {}

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.manifest["params"]["image_size"])

    def image(self, index: int) -> np.ndarray:
        if index not in self._images:
            path = self.root / self.manifest["paths"]["images"] / f"{index:05d}.bin"
            self._images[index] = tensorio.load_tensor(path)
        return self._images[index]

    def images(self) -> np.ndarray:
        return np.stack([self.image(i) for i in range(len(self.scenes))])

    def mean_image(self) -> np.ndarray:
        return tensorio.load_tensor(self.root / self.manifest["paths"]["mean_image"])

    def object_masks(self) -> dict[str, BitMask]:
        with open(self.root / self.manifest["paths"]["masks"]) as f:
            return {k: BitMask.from_record(v) for k, v in json.load(f).items()}

    def __len__(self) -> int:
        return len(self.questions)
