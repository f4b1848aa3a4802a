"""Post-process a probability map and score it with the page-level metrics.

Run: python3 demos/postproc_metrics.py
"""
import numpy as np

from textmapseg.postproc import postprocess
from textmapseg.segmetrics import (
    DEFAULT_RANGE,
    averaged_metric,
    classify_outcome,
    iou,
    miou,
    precision_at,
    recall_at,
    significance_stars,
    welch_t_test,
)

rng = np.random.default_rng(0)
gt = np.zeros((100, 100), np.uint8)
gt[10:40, 10:60] = 1
gt[60:90, 20:80] = 2

# noisy probabilities: the right class is likely, plus a few speckles of the other one
prob = rng.uniform(0, 0.45, (100, 100, 2))
prob[..., 0][gt == 1] += 0.3
prob[..., 1][gt == 2] += 0.3
prob[5:9, 85:95, 1] = 0.9  # a 40 px blob, far below 5% of the page
pred = postprocess(prob, threshold=0.5, min_area_ratio=0.05)
print("speckle removed:", not pred[5:9, 85:95].any())

results = {c: iou(pred == c, gt == c) for c in (1, 2)}
for c, r in results.items():
    print(f"class {c}: IoU {float(r.value):.3f}, outcome at 0.8 = {classify_outcome(r, 0.8).value}")

# across pages: a page without the class in either mask is a true negative and does not count
empty = iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool))
suite = [results[1], empty, results[2]]
print("mIoU over J:", round(miou(suite), 4))
outcomes = [classify_outcome(r, 0.6) for r in suite]
print("P@60 =", precision_at(outcomes), " R@60 =", recall_at(outcomes))
print("P@50:5:95 =", float(averaged_metric("P", suite, DEFAULT_RANGE).value))

# two models, ten runs each
a = [79.3, 81.2, 77.5, 80.1, 78.8, 82.0, 76.9, 79.9, 80.4, 76.0]
b = [82.2, 84.1, 80.0, 83.5, 81.7, 79.9, 84.8, 82.6, 80.3, 81.5]
w = welch_t_test(b, a)
print(f"Welch t={w.t:.3f} df={w.df:.2f} p={w.p:.4f} {significance_stars(w.p)}")
