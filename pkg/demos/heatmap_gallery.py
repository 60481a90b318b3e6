"""
Looking at individual heatmaps
==============================

Uses the model and evaluation data written by ``small_benchmark.py`` (pass
the same directory). For a few questions the pooled LRP and gradient maps
are written as grayscale PGM files, and printed as text next to the
ground-truth mask of the queried object.
"""
import sys
from pathlib import Path

from xaibench.attribution import best_variant
from xaibench.harness import Dataset
from xaibench.harness.report import dump_heatmaps, read_pgm
from xaibench.micronet.io import load_model

root = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/demo_run")
model = load_model(root / "model.bin")
data = Dataset(root / "eval")
variants = [best_variant("lrp").name, best_variant("gradient").name]
paths = dump_heatmaps(model, data, variants, [0, 1, 2], root / "heatmaps")

shades = " .:-=+*#%@"
for qid in (0, 1, 2):
    q = data.questions[qid]
    print(f"\nquestion {qid}: {q.record['question_text']}  answer {q.answer}")
    gt = q.gt_mask("single_object").bits
    maps = [read_pgm(p) for p in paths if p.name.startswith(f"q{qid:05d}_")]
    print("ground truth".ljust(34) + "".join(v.split("[")[0].ljust(34) for v in variants))
    for r in range(0, gt.shape[0], 2):
        cells = ["".join("#" if b else "." for b in gt[r])]
        cells += ["".join(shades[int(v) * 9 // 255] for v in m[r]) for m in maps]
        print("  ".join(c.ljust(32) for c in cells))
print("\nPGM files in", root / "heatmaps")
