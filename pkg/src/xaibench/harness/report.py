"""Report files (CSV / JSON) and grayscale heatmap dumps."""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import astuple, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import tensorio
from ..attribution import METHODS, Context, DiscardPoint, default_pooling, explain, grad_cam, parse_variant
from ..metrics import pool
from ..micronet.model import Model, predict
from .dataset import Dataset, IoFailure
from .evaluation import ReportRow, question_seed

COLUMNS = tuple(f.name for f in fields(ReportRow))
_FLOATS = {"mean", "std", "median"}
_INTS = {"n_scored", "n_discarded"}


def _fmt(name: str, value) -> str:
    if name in _FLOATS:
        return "" if value is None else f"{value:.6f}"
    return str(value)


def format_report(rows: Sequence[ReportRow], fmt: str = "csv") -> str:
    if not rows:
        raise ValueError("no rows to report")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([_fmt(k, v) for k, v in zip(COLUMNS, astuple(row))])
        return buf.getvalue()
    if fmt == "json":
        records = []
        for row in rows:
            rec = {}
            for k, v in zip(COLUMNS, astuple(row)):
                rec[k] = (None if v is None else float(f"{v:.6f}")) if k in _FLOATS else v
            records.append(rec)
        return json.dumps(records, indent=1) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(rows: Sequence[ReportRow], fmt: str, path) -> None:
    text = format_report(rows, fmt)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _parse(name: str, value):
    if name in _FLOATS:
        return None if value in ("", None) else float(value)
    if name in _INTS:
        return int(value)
    return value


def load_report(path) -> list[ReportRow]:
    text = Path(path).read_text()
    if text.lstrip().startswith("["):
        return [ReportRow(**{k: _parse(k, rec[k]) for k in COLUMNS}) for rec in json.loads(text)]
    reader = csv.DictReader(io.StringIO(text))
    return [ReportRow(**{k: _parse(k, rec[k]) for k in COLUMNS}) for rec in reader]


# ------------------------------------------------------------------ heatmaps

def quantize(h: np.ndarray) -> np.ndarray:
    """8-bit gray levels floor(h / max * 255 + 0.5); an all-zero map stays zero."""
    h = np.asarray(h, dtype=float)
    top = h.max() if h.size else 0.0
    if top <= 0:
        return np.zeros(h.shape, dtype=np.uint8)
    return np.floor(h / top * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    height, width = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+255\s")  # one whitespace byte before the pixels


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise ValueError("not an 8-bit binary graymap")
    width, height = int(m.group(1)), int(m.group(2))
    pixels = data[m.end(): m.end() + width * height]
    if len(pixels) != width * height:
        raise ValueError("graymap is truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def variant_slug(name: str) -> str:
    """File-name friendly variant name: ``lrp[input=box]`` becomes ``lrp-input=box``."""
    return re.sub(r"[^A-Za-z0-9_.=-]+", "-", name).strip("-")


def dump_heatmaps(model: Model, data: Dataset, variants: Sequence[str], question_ids: Sequence[int],
                  out_dir, pooling: str | None = None, seed: int = 0) -> list[Path]:
    """Write ``q<id>_<variant>.pgm`` per (question, variant) plus the raw relevance as a tensor file.

    Heatmaps are pooled with ``pooling`` (default: the method's mass pooling)
    and explain the predicted class. Grad-CAM also writes its low-resolution
    map as ``*_raw.bin``. Zero maps and discarded points produce an all-zero
    image and a ``.discard.txt`` note next to it.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    mean = data.mean_image()
    written = []
    for qid in question_ids:
        if not 0 <= qid < len(data.questions):
            raise KeyError(f"no question {qid}")
        q = data.questions[qid]
        x = data.image(q.image_index)
        embedding = model.encode_question(q.program.tokens())
        target, _ = predict(model, x, embedding)
        ctx = Context(seed=question_seed(seed, qid), mean_image=mean)
        for name in variants:
            v = parse_variant(name)
            base = f"q{qid:05d}_{variant_slug(v.name)}"
            note = None
            try:
                r = explain(v, model, x, embedding, target, ctx)
            except DiscardPoint as exc:
                r, note = None, f"discarded: {exc}"
            if r is None:
                h = np.zeros(x.shape[1:])
            else:
                tensorio.save_tensor(out / (base + ".bin"), r)
                if v.method == "grad_cam":
                    raw = grad_cam(model, x, embedding, target, **v.kwargs).raw
                    tensorio.save_tensor(out / (base + "_raw.bin"), raw)
                p = "none" if METHODS[v.method].heatmap_2d else (pooling or default_pooling(v.method))
                h = pool(r, p)
                if not h.max() > 0:
                    note = "discarded: heatmap is identically zero"
            try:
                write_pgm(out / (base + ".pgm"), quantize(h))
                if note is not None:
                    (out / (base + ".discard.txt")).write_text(f"{v.name}\n{note}\n")
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
            written.append(out / (base + ".pgm"))
    return written
