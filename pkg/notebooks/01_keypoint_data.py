"""
Synthetic fall sequences, frame sampling and client partitions
===============================================================

Generates a small labelled corpus, shows how raw clips become fixed-length
model inputs and how a Dirichlet(0.5) split skews the clients.
Run with ``python3 notebooks/01_keypoint_data.py``.
"""

import numpy as np

from flame.data import (CLASS_NAMES, COCO_KEYPOINTS, GeneratorSpec, generate_synthetic,
                        partition_non_iid, sample_indices, split_train_val_test, to_arrays)

# a raw clip of 90 frames is thinned to 45 evenly spaced ones; both ends survive
idx = sample_indices(90, 45)
print("first/last sampled frames:", idx[:4], "...", idx[-4:])

# shorter clips are padded by repeating the last frame
print("6 raw frames -> 10:", sample_indices(6, 10))

samples = generate_synthetic(GeneratorSpec(noise_std=0.02, frames_raw=60, seed=0), 400)
labels = np.array([s.label for s in samples])
for c, name in enumerate(CLASS_NAMES):
    print(f"{name:14s} {np.sum(labels == c):4d}")

# how far does the hip centre drop over a clip, per class?
hips = [COCO_KEYPOINTS.index("left_hip"), COCO_KEYPOINTS.index("right_hip")]
for c, name in enumerate(CLASS_NAMES):
    drops = [s.frames[-1, hips, 1].mean() - s.frames[0, hips, 1].mean()
             for s in samples if s.label == c]
    print(f"{name:14s} mean hip drop {np.mean(drops):+.3f}")

train, val, test = split_train_val_test(samples, seed=0)
print("split sizes:", len(train), len(val), len(test))

X, y = to_arrays(train, seq_len=15)
print("model input:", X.shape, "labels:", y.shape)

clients = partition_non_iid(train, 6, alpha=0.5, seed=0)
print("\nclient  " + "  ".join(n[:8] for n in CLASS_NAMES))
for c in clients:
    print(f"{c.client_id:6d}  " + "  ".join(f"{v:8d}" for v in c.class_histogram()))
