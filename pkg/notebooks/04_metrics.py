"""
Macro metrics on an imbalanced confusion matrix
================================================
"""

import numpy as np

from flame.data import CLASS_NAMES
from flame.metrics import confusion, report

rng = np.random.default_rng(0)
labels = rng.choice(4, 500, p=[0.34, 0.15, 0.26, 0.25])
# a classifier that confuses sideways falls with forward falls a third of the time
preds = labels.copy()
flip = (labels == 1) & (rng.random(500) < 1 / 3)
preds[flip] = 0

cm = confusion(labels, preds, 4)
print(cm.counts)
rep = report(cm)
print(f"accuracy {rep.accuracy:.2f}  macro P {rep.precision:.2f}  macro R {rep.recall:.2f}  "
      f"F1 {rep.f1:.2f}  mean per-class F1 {rep.f1_class_mean:.2f}")
for name, p, r in zip(CLASS_NAMES, rep.per_class_precision, rep.per_class_recall):
    print(f"{name:14s} P {p:6.2f}  R {r:6.2f}")
