"""Scoring explanation methods against ground-truth masks and tuning their variants.

Each eligible question is explained for the model's predicted class. Every
(variant, pooling, GT kind, metric) combination is a report cell; points a
method or metric cannot score (zero Grad-CAM map, IG tolerance failure, zero
heatmap, undefined or empty GT) count as discards of that cell only.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ..attribution import METHODS, Context, DiscardPoint, explain, parse_variant
from ..metrics import METRICS, NO_POOLING, ZeroHeatmap, aggregate, canonical_pooling, pool
from ..micronet.io import load_model
from ..micronet.model import Model, predict
from ..program import GT_KINDS, answer_class
from .dataset import Dataset, Question

RANDOM_BASELINE = "uniform_random"


class NoEligibleQuestions(ValueError):
    """No question survives the filters."""


@dataclass(frozen=True)
class Filters:
    correct_only: bool = False
    min_probability: float = 0.0  # predicted-class probability must exceed this
    min_gt_pixels: int = 0  # smaller GT masks leave the question out of that GT kind's cells
    question_types: tuple[str, ...] | None = None
    exclude_counting: bool = False
    exclude_exist_no: bool = False


@dataclass(frozen=True)
class EvaluationConfig:
    model_path: str
    data_path: str
    variants: tuple[str, ...]  # variant names, or RANDOM_BASELINE
    poolings: tuple[str, ...] = ("l2_norm_sq",)
    gts: tuple[str, ...] = ("single_object",)
    metrics: tuple[str, ...] = ("mass",)
    filters: Filters = Filters()
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name, values in (("variants", self.variants), ("poolings", self.poolings),
                             ("gts", self.gts), ("metrics", self.metrics)):
            if not values:
                raise ValueError(f"at least one entry needed in {name}")
        for v in self.variants:
            if v != RANDOM_BASELINE:
                parse_variant(v)
        for p in self.poolings:
            canonical_pooling(p)
        for g in self.gts:
            if g not in GT_KINDS:
                raise ValueError(f"unknown GT kind {g!r}")
        for m in self.metrics:
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}")
        if self.workers < 1:
            raise ValueError("workers must be positive")


@dataclass(frozen=True)
class ReportRow:
    method: str
    variant: str
    pooling: str
    gt: str
    metric: str
    mean: float | None
    std: float | None
    median: float | None
    n_scored: int
    n_discarded: int


@dataclass(frozen=True)
class Prediction:
    question: int
    label: int
    predicted: int
    probability: float


@dataclass
class Scores:
    """Per-question scores of every cell; ``None`` marks a discard."""
    cells: list[tuple[str, str, str, str]]  # (variant, pooling, gt, metric)
    values: dict = field(default_factory=dict)  # cell -> {question index: score or None}
    predictions: dict = field(default_factory=dict)  # question index -> Prediction


def method_of(variant: str) -> str:
    return RANDOM_BASELINE if variant == RANDOM_BASELINE else parse_variant(variant).method


def cell_poolings(variant: str, poolings: Sequence[str]) -> list[str]:
    """Methods that already return a 2D heatmap (and the random baseline) only use pooling "none"."""
    m = method_of(variant)
    if m == RANDOM_BASELINE or METHODS[m].heatmap_2d:
        return [NO_POOLING]
    return [canonical_pooling(p) for p in poolings]


def make_cells(variants, poolings, gts, metrics) -> list[tuple[str, str, str, str]]:
    return [(v, p, g, m) for v in variants for p in cell_poolings(v, poolings) for g in gts for m in metrics]


def question_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 7]).generate_state(1)[0])


def passes_question_filters(q: Question, pred: Prediction, f: Filters) -> bool:
    if f.question_types is not None and q.question_type not in f.question_types:
        return False
    if f.exclude_counting and q.program.involves_counting:
        return False
    if f.exclude_exist_no and q.question_type == "exist" and q.answer == "no":
        return False
    if f.correct_only and pred.predicted != pred.label:
        return False
    return pred.probability > f.min_probability


def predict_question(model: Model, data: Dataset, q: Question) -> Prediction:
    embedding = model.encode_question(q.program.tokens())
    cls, prob = predict(model, data.image(q.image_index), embedding)
    return Prediction(q.index, answer_class(q.answer), cls, prob)


def random_heatmap(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(seed).random(tuple(shape))


def score_question(model: Model, data: Dataset, q: Question, target: int, cells, seed: int,
                   min_gt_pixels: int = 0, mean_image=None) -> dict:
    """Score one question in every cell: {cell: score, None for a discard}; cells the question
    is not eligible for (GT kind absent or below ``min_gt_pixels``) are left out."""
    x = data.image(q.image_index)
    embedding = model.encode_question(q.program.tokens())
    qseed = question_seed(seed, q.index)
    ctx = Context(seed=qseed, mean_image=mean_image)
    masks = {}
    for gt in {c[2] for c in cells}:
        status = q.gt_status(gt)
        if status == "absent":
            continue
        mask = q.gt_mask(gt)
        if mask is not None and mask.pixel_count < min_gt_pixels:
            continue
        masks[gt] = mask
    out = {}
    relevance = {}
    heatmaps = {}
    for cell in cells:
        variant, pooling, gt, metric = cell
        if gt not in masks:
            continue
        if variant not in relevance:
            if variant == RANDOM_BASELINE:
                relevance[variant] = random_heatmap(qseed, x.shape[1:])
            else:
                try:
                    relevance[variant] = explain(parse_variant(variant), model, x, embedding, target, ctx)
                except DiscardPoint:
                    relevance[variant] = None
        r = relevance[variant]
        if r is None or masks[gt] is None:
            out[cell] = None
            continue
        key = (variant, pooling)
        if key not in heatmaps:
            heatmaps[key] = pool(r, pooling)
        try:
            out[cell] = METRICS[metric](heatmaps[key], masks[gt])
        except ZeroHeatmap:
            out[cell] = None
    return out


# Worker state for process-parallel scoring: loaded once per process.
_WORKER: dict = {}


def _init_worker(model_path, data_path):
    _WORKER["model"] = load_model(model_path)
    _WORKER["data"] = Dataset(data_path)
    _WORKER["mean"] = _WORKER["data"].mean_image()


def _score_job(job):
    index, target, cells, seed, min_pixels = job
    data = _WORKER["data"]
    return index, score_question(_WORKER["model"], data, data.questions[index], target, cells, seed,
                                 min_pixels, _WORKER["mean"])


def collect_scores(cfg: EvaluationConfig, model: Model | None = None, data: Dataset | None = None) -> Scores:
    """Predict, filter and score every eligible question."""
    model = load_model(cfg.model_path) if model is None else model
    data = Dataset(cfg.data_path) if data is None else data
    cells = make_cells(cfg.variants, cfg.poolings, cfg.gts, cfg.metrics)
    scores = Scores(cells, {c: {} for c in cells})
    eligible = []
    for q in data.questions:
        pred = predict_question(model, data, q)
        if passes_question_filters(q, pred, cfg.filters):
            scores.predictions[q.index] = pred
            eligible.append(q)
    if not eligible:
        raise NoEligibleQuestions("no question passes the filters")
    jobs = [(q.index, scores.predictions[q.index].predicted, cells, cfg.seed, cfg.filters.min_gt_pixels)
            for q in eligible]
    if cfg.workers == 1:
        mean = data.mean_image()
        results = [(j[0], score_question(model, data, data.questions[j[0]], j[1], cells, cfg.seed, j[4], mean))
                   for j in jobs]
    else:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker,
                                 initargs=(cfg.model_path, cfg.data_path)) as pool_:
            results = list(pool_.map(_score_job, jobs, chunksize=4))
    for index, per_cell in results:
        for cell, value in per_cell.items():
            scores.values[cell][index] = value
    return scores


def summarize(scores: Scores) -> list[ReportRow]:
    rows = []
    for cell in scores.cells:
        variant, pooling, gt, metric = cell
        values = scores.values[cell]
        # sorted accumulation: the aggregate does not depend on scoring order
        scored = sorted(v for v in values.values() if v is not None)
        n_discarded = sum(v is None for v in values.values())
        stats = aggregate(scored) if scored else {"mean": None, "std": None, "median": None}
        rows.append(ReportRow(method_of(variant), variant, pooling, gt, metric,
                              stats["mean"], stats["std"], stats["median"], len(scored), n_discarded))
    return rows


def run_evaluation(cfg: EvaluationConfig, model: Model | None = None, data: Dataset | None = None) -> list[ReportRow]:
    return summarize(collect_scores(cfg, model, data))


# ------------------------------------------------------------------ tuning

@dataclass(frozen=True)
class TuningEntry:
    method: str
    metric: str
    variant: str
    pooling: str
    mean: float


def select_winners(rows: Iterable[ReportRow]) -> list[TuningEntry]:
    """Best (variant, pooling) per (method, metric) by mean score; the earlier row wins ties.

    Rows without any scored point never win. Output follows first appearance
    of each (method, metric).
    """
    best: dict[tuple[str, str], ReportRow] = {}
    for row in rows:
        if row.mean is None:
            continue
        key = (row.method, row.metric)
        if key not in best or row.mean > best[key].mean:
            best[key] = row
    return [TuningEntry(r.method, r.metric, r.variant, r.pooling, r.mean) for r in best.values()]


def default_grid(methods: Sequence[str]) -> tuple[str, ...]:
    return tuple(v.name for m in methods for v in METHODS[m].grid)


def tune_methods(cfg: EvaluationConfig, model: Model | None = None,
                 data: Dataset | None = None) -> tuple[list[TuningEntry], list[ReportRow]]:
    """Grid search on GT Single Object over correctly answered questions."""
    cfg = replace(cfg, gts=("single_object",), filters=replace(cfg.filters, correct_only=True))
    rows = run_evaluation(cfg, model, data)
    return select_winners(rows), rows
