"""
Selective upload against full-model averaging
==============================================

Trains a small model on 6 skewed clients twice, once uploading everything
and once uploading the attention-ranked subset after warm-up, then compares
accuracy and parameters sent. Takes a minute or two on one core.
"""

from dataclasses import replace

import numpy as np

from flame.data import GeneratorSpec, generate_synthetic, partition_non_iid, split_train_val_test
from flame.federation import FedConfig, budget_plan, run_federated, total_parameters
from flame.model import PAPER_PROFILE, AttentionStats, ModelConfig

model_cfg = ModelConfig(seq_len=15, d_model=16, n_heads=2, layers_spatial=1, layers_temporal=1)
samples = generate_synthetic(GeneratorSpec(noise_std=0.02, seed=0), 600)
train, _, test = split_train_val_test(samples, seed=0)
clients = partition_non_iid(train, 6, alpha=0.5, seed=0)

base = FedConfig(rounds=12, clients=6, warmup_rounds=4, local_epochs=2, lr=3e-3, seed=0)
runs = {}
for name, policy in (("fedavg", "all"), ("flame", "budget")):
    state = run_federated(replace(base, selection_policy=policy), clients, model_cfg, test=test)
    runs[name] = state
    last = state.history[-1]
    print(f"{name:7s} accuracy {last.metrics.accuracy:6.2f}%  F1 {last.metrics.f1:6.2f}%  "
          f"params sent {state.cumulative_params:,}")

total = total_parameters(model_cfg)
per_client = runs["flame"].ledger[-1] / len(clients)
print(f"\nafter warm-up each client sends {per_client:,.0f} of {total:,} parameters")

# which groups make the cut for the full-size model with uniform attention?
stats = AttentionStats(np.full(17, 1 / 17), np.full(45, 1 / 45), 1)
groups, rows = budget_plan(PAPER_PROFILE, stats, 0.59)
print("full-size model sends", len(groups), "groups plus", len(rows), "pos_spatial rows")
