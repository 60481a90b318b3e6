"""Dataset generation, toy training, evaluation, tuning and reports."""
from .dataset import Dataset, DatasetParams, IoFailure, Question, generate_dataset
from .evaluation import (
    RANDOM_BASELINE,
    EvaluationConfig,
    Filters,
    NoEligibleQuestions,
    ReportRow,
    Scores,
    TuningEntry,
    collect_scores,
    run_evaluation,
    select_winners,
    summarize,
    tune_methods,
)
from .report import dump_heatmaps, emit_report, format_report, load_report, quantize, read_pgm, write_pgm
from .training import ToyHyperparams, TrainingReport, train_toy_model
