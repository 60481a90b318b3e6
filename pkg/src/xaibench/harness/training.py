"""Training the toy Relation Network on a generated dataset."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from ..micronet.io import save_model
from ..micronet.model import Model, ModelConfig, build_model
from ..micronet.train import TrainConfig, accuracy, train
from ..program import answer_class, program_vocabulary
from .dataset import Dataset, Question


@dataclass(frozen=True)
class ToyHyperparams:
    lr: float = 2e-3
    epochs: int = 10
    batch: int = 32
    seed: int = 0
    holdout_fraction: float = 0.1  # the last scenes are held out, so no held-out image is seen in training
    question_types: tuple[str, ...] | None = None  # None trains on every question
    conv_channels: tuple[int, ...] = (16, 16, 16, 16)
    # 2x2 stride-2 kernels tile the image: each feature cell sees its own 8x8 patch at 32 px
    strides: tuple[int, ...] = (2, 2, 2, 1)
    kernel_size: int | tuple[int, ...] = (2, 2, 2, 1)
    rn_hidden: tuple[int, ...] = (32, 32, 32, 32)
    classifier_hidden: tuple[int, ...] = (32, 32)
    question_dim: int = 16

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 2 or self.lr < 0:
            raise ValueError("need epochs >= 0, batch >= 2 and lr >= 0")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")

    def model_config(self, image_size) -> ModelConfig:
        return ModelConfig(
            input_shape=(3,) + tuple(image_size),
            conv_channels=self.conv_channels,
            strides=self.strides,
            kernel_size=self.kernel_size,
            rn_hidden=self.rn_hidden,
            classifier_hidden=self.classifier_hidden,
            question_dim=self.question_dim,
        )


@dataclass
class TrainingReport:
    n_train: int
    n_heldout: int
    loss_history: list = field(default_factory=list)
    heldout_accuracy: float = math.nan
    heldout_by_type: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def split_questions(data: Dataset, holdout_fraction: float,
                    question_types=None) -> tuple[list[Question], list[Question]]:
    """(train, held-out) questions; held-out questions are those on the last scenes."""
    n_scenes = len(data.scenes)
    first_heldout = n_scenes - max(1, int(round(holdout_fraction * n_scenes)))
    qs = [q for q in data.questions if question_types is None or q.question_type in question_types]
    return ([q for q in qs if q.image_index < first_heldout], [q for q in qs if q.image_index >= first_heldout])


def _arrays(model: Model, questions: list[Question]):
    return ([q.image_index for q in questions],
            [model.encoder.token_ids(q.program.tokens()) for q in questions],
            [answer_class(q.answer) for q in questions])


def heldout_accuracy(model: Model, data: Dataset, questions: list[Question], images=None) -> dict:
    """Accuracy per question type plus ``"all"``."""
    images = data.images() if images is None else images
    out = {}
    for qtype in sorted({q.question_type for q in questions}):
        sel = [q for q in questions if q.question_type == qtype]
        out[qtype] = accuracy(model, images, *_arrays(model, sel))
    if questions:
        out["all"] = accuracy(model, images, *_arrays(model, questions))
    return out


def train_toy_model(data: Dataset | str | Path, hp: ToyHyperparams = ToyHyperparams(), out_path=None,
                    log: Callable[[str], None] | None = None) -> tuple[Model, TrainingReport]:
    """Build, train and (optionally) save a model; deterministic under ``hp.seed``."""
    data = data if isinstance(data, Dataset) else Dataset(data)
    model = build_model(hp.model_config(data.image_size), seed=hp.seed, vocab=program_vocabulary())
    train_qs, held_qs = split_questions(data, hp.holdout_fraction, hp.question_types)
    if not train_qs:
        raise ValueError("no training questions")
    images = data.images()
    cfg = TrainConfig(epochs=hp.epochs, batch_size=hp.batch, lr=hp.lr)
    history = train(model, images, *_arrays(model, train_qs), cfg, seed=hp.seed, log=log)
    report = TrainingReport(len(train_qs), len(held_qs), history)
    if held_qs:
        report.heldout_by_type = heldout_accuracy(model, data, held_qs, images)
        report.heldout_accuracy = report.heldout_by_type["all"]
    if out_path is not None:
        save_model(model, out_path)
    return model, report
