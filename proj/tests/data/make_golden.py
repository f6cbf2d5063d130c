#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Regenerates the golden evaluation fixture with a stdlib-only reference implementation."""
import json
import math
import random

ORGANS = ["kidney", "liver", "spleen"]
CLASSES = ["healthy", "low", "high"]
WEIGHTS = [1.0, 2.0, 4.0]
COLUMNS = [f"{o}_{c}" for o in ORGANS for c in CLASSES]
THRESHOLDS = [0.35, 0.2, 0.15, 0.4, 0.25, 0.2, 0.3, 0.3, 0.1]

rng = random.Random(20240611)
ids = [f"g{n:03d}" for n in range(24)]
labels, preds = {}, {}
for pid in ids:
    labels[pid] = [rng.choices([0, 1, 2], weights=[5, 3, 2])[0] for _ in ORGANS]
    row = []
    for _ in ORGANS:
        raw = [round(rng.uniform(0.02, 1.0), 6) for _ in CLASSES]
        s = sum(raw)
        row.extend(round(v / s, 9) for v in raw)
    preds[pid] = row

with open("golden_labels.csv", "w") as f:
    f.write("patient_id,kidney,liver,spleen\n")
    for pid in ids:
        f.write(pid + "," + ",".join(CLASSES[c] for c in labels[pid]) + "\n")
with open("golden_predictions.csv", "w") as f:
    f.write("patient_id," + ",".join(COLUMNS) + "\n")
    for pid in ids:
        f.write(pid + "," + ",".join(f"{v:.9f}" for v in preds[pid]) + "\n")
# Scores are read back from the CSV text so both sides see identical values.
preds = {pid: [float(f"{v:.9f}") for v in row] for pid, row in preds.items()}

organ_scores = []
for o in range(3):
    num = den = 0.0
    for pid in ids:
        y = labels[pid][o]
        p = min(max(preds[pid][3 * o + y], 1e-15), 1 - 1e-15)
        num += WEIGHTS[y] * -math.log(p)
        den += WEIGHTS[y]
    organ_scores.append(num / den)

aps, precisions, recalls = [], [], []
for col in range(9):
    o, c = divmod(col, 3)
    scores = [preds[pid][col] for pid in ids]
    truth = [1 if labels[pid][o] == c else 0 for pid in ids]
    # Threshold sweep over distinct scores; equals the rank formula when scores are distinct.
    pos = sum(truth)
    if pos:
        ap, prev_recall = 0.0, 0.0
        for t in sorted(set(scores), reverse=True):
            tp = sum(1 for s, y in zip(scores, truth) if s >= t and y)
            fp = sum(1 for s, y in zip(scores, truth) if s >= t and not y)
            recall = tp / pos
            ap += (recall - prev_recall) * tp / (tp + fp)
            prev_recall = recall
        aps.append(ap)
    tp = sum(1 for s, y in zip(scores, truth) if s >= THRESHOLDS[col] and y)
    fp = sum(1 for s, y in zip(scores, truth) if s >= THRESHOLDS[col] and not y)
    fn = sum(1 for s, y in zip(scores, truth) if s < THRESHOLDS[col] and y)
    precisions.append(tp / (tp + fp) if tp + fp else 0.0)
    recalls.append(tp / (tp + fn) if tp + fn else 0.0)

assert len(set(v for row in preds.values() for v in row)) == 24 * 9, "scores must be distinct"
golden = {
    "thresholds": dict(zip(COLUMNS, THRESHOLDS)),
    "rsna_score": sum(organ_scores) / 3,
    "organ_rsna": dict(zip(ORGANS, organ_scores)),
    "map": sum(aps) / len(aps),
    "macro_precision": sum(precisions) / 9,
    "macro_recall": sum(recalls) / 9,
}
with open("golden_thresholds.json", "w") as f:
    json.dump(golden["thresholds"], f, indent=2, sort_keys=True)
    f.write("\n")
with open("golden_report.json", "w") as f:
    json.dump(golden, f, indent=2, sort_keys=True)
    f.write("\n")
