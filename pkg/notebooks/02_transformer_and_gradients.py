"""
The keypoint transformer and its hand-written backward pass
============================================================

Counts parameters for the full-size profile, runs a forward pass and checks
one gradient entry against a central difference.
"""

import numpy as np

from flame import nn
from flame.model import (PAPER_PROFILE, KeypointTransformer, ModelConfig, group_sizes,
                         init_params)

sizes = group_sizes(PAPER_PROFILE)
print("input_embed", sizes["input_embed"], " pos_spatial", sizes["pos_spatial"],
      " pos_temporal", sizes["pos_temporal"], " head", sizes["head"])
block = sum(v for k, v in sizes.items() if k.startswith("spatial.0."))
print("one transformer block:", block)
print("total:", sum(sizes.values()))

cfg = ModelConfig(seq_len=4, n_keypoints=5, d_model=8, n_heads=2, layers_spatial=1,
                  layers_temporal=1, dtype="float64")
rng = np.random.default_rng(0)
params = {k: v + rng.normal(0, 0.05, v.shape) for k, v in init_params(cfg, 0).items()}
model = KeypointTransformer(cfg, params)
x = rng.uniform(0, 1, (3, cfg.seq_len, cfg.n_keypoints, 2))
y = np.array([0, 2, 3])

logits, stats = model.forward(x)
print("\nlogits shape", logits.shape)
print("keypoint importance (sums to 1):", np.round(stats.keypoint_importance, 3))
print("time importance:", np.round(stats.time_importance, 3))

loss, grads, _ = model.loss_and_grads(x, y, train=False)
name, i = "spatial.0.attn_q.weight", (1, 3)
h = 1e-6
params[name][i] += h
up = nn.cross_entropy_loss(KeypointTransformer(cfg, params).forward(x)[0], y)
params[name][i] -= 2 * h
down = nn.cross_entropy_loss(KeypointTransformer(cfg, params).forward(x)[0], y)
params[name][i] += h
print(f"\nd loss / d {name}{i}: analytic {grads[name][i]:.8f}  numeric {(up - down) / (2 * h):.8f}")
