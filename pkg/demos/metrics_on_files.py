"""
Scoring external predictions
============================

The metrics work on plain JSON Lines files, so predictions from any model
can be scored. Here fake predictions are written next to fake truths and
evaluated under the three normalisations.
"""

import tempfile
from pathlib import Path

import numpy as np

from gatcascade.geometry import canonical_face_model
from gatcascade.metrics import NormalizationSpec, evaluate_files, write_landmark_file

rng = np.random.default_rng(1)
model = canonical_face_model()

# 50 "faces": the truth is a random 68-point cloud, predictions add 2 px noise
truth = [{"id": "face%02d" % i, "landmarks": rng.uniform(40, 220, size=(68, 2))} for i in range(50)]
pred = [{"id": r["id"], "landmarks": r["landmarks"] + rng.normal(0, 2.0, size=(68, 2))} for r in truth]

out = Path(tempfile.mkdtemp())
write_landmark_file(out / "truth.jsonl", truth)
write_landmark_file(out / "pred.jsonl", pred)

for kind in ("inter_ocular", "inter_pupil", "box"):
    report, ced = evaluate_files(out / "pred.jsonl", out / "truth.jsonl", NormalizationSpec.for_model(model, kind), (8.0, 10.0))
    print("%-12s NME %.3f  AUC10 %.2f  FR10 %.1f  NPE90 %.3f" % (kind, report.nme, report.auc[10.0], report.fr[10.0], report.npe90))

# the CED curve as CSV, for plotting elsewhere
(out / "ced.csv").write_text(ced.to_csv())
print("CED written to", out / "ced.csv")
