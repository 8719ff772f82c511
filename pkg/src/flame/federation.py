"""Federated training: local updates, attention-driven upload selection, aggregation.

Randomness is keyed, never shared: client ``k`` in round ``t`` draws its batch
order and dropout masks from ``default_rng([seed, 1, t, k])``; centralized
epoch ``e`` uses ``default_rng([seed, 2, e])``; partial participation in round
``t`` uses ``default_rng([seed, 3, t])``. Results therefore do not depend on
how many clients run concurrently.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .data import ClientDataset, to_arrays
from .metrics import ConfusionMatrix, MetricReport, confusion, report
from .model import (AttentionAccumulator, AttentionStats, KeypointTransformer, ModelConfig,
                    copy_params, group_of, group_sizes, init_params, param_groups)
from .nn import OptimizerState, optimizer_step

log = logging.getLogger("flame")

LOCAL_STREAM, CENTRAL_STREAM, PARTICIPATION_STREAM = 1, 2, 3
POLICIES = ("all", "keypoint_rows", "budget")
AGGREGATIONS = ("mean", "weighted")
# never dropped by the budget policy
ESSENTIAL_GROUPS = ("input_embed", "head")


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    clients: int = 56
    local_epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    warmup_rounds: int = 30
    selection_policy: str = "budget"
    budget_fraction: float = 0.59
    importance_top_fraction: float = 0.5
    aggregation: str = "mean"
    participation: float = 1.0
    shuffle: bool = True
    confidence_threshold: float = 0.3
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be >= 0")
        if self.clients < 1 or self.batch_size < 1:
            raise ValueError("clients and batch_size must be >= 1")
        if not 0 <= self.warmup_rounds <= self.rounds:
            raise ValueError(f"warmup_rounds={self.warmup_rounds} must be in [0, rounds={self.rounds}]")
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ValueError(f"budget_fraction must be in (0, 1], got {self.budget_fraction}")
        if not 0.0 < self.importance_top_fraction <= 1.0:
            raise ValueError("importance_top_fraction must be in (0, 1]")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must be in (0, 1]")
        if self.selection_policy not in POLICIES:
            raise ValueError(f"selection_policy must be one of {POLICIES}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


# --------------------------------------------------------------------------
# local training


@dataclass
class LocalResult:
    client_id: int
    params: dict[str, np.ndarray]
    stats: AttentionStats
    losses: list[float]
    n_samples: int


class EmptyClientError(ValueError):
    pass


def _arrays(client, cfg: ModelConfig, threshold: float):
    if isinstance(client, ClientDataset):
        X, y = to_arrays(client.samples, cfg.seq_len, threshold)
        return client.client_id, X.astype(cfg.np_dtype), y
    client_id, X, y = client
    return client_id, np.asarray(X, dtype=cfg.np_dtype), np.asarray(y)


def train_epoch(model: KeypointTransformer, opt: OptimizerState, X, y, batch_size: int,
                rng: np.random.Generator, shuffle: bool = True,
                acc: AttentionAccumulator | None = None) -> list[float]:
    order = rng.permutation(len(X)) if shuffle else np.arange(len(X))
    losses = []
    for start in range(0, len(X), batch_size):
        idx = order[start:start + batch_size]
        loss, grads, stats = model.loss_and_grads(X[idx], y[idx], rng)
        model.params = optimizer_step(model.params, grads, opt)
        losses.append(loss)
        if acc is not None:
            acc.update(stats)
    return losses


def _eval_stats(model: KeypointTransformer, X, batch_size=256) -> AttentionStats:
    acc = AttentionAccumulator()
    for start in range(0, len(X), batch_size):
        _, stats = model.forward(X[start:start + batch_size], train=False)
        acc.update(stats)
    return acc.result()


def local_train(client, w_global: dict, model_cfg: ModelConfig, config: FedConfig,
                round_idx: int = 1) -> LocalResult:
    """Run ``local_epochs`` of mini-batch training starting from ``w_global``.

    ``client`` is a :class:`ClientDataset` or a prepared ``(client_id, X, y)``
    triple. Attention statistics come from the final epoch (or from an eval
    pass when no epochs are run).
    """
    client_id, X, y = _arrays(client, model_cfg, config.confidence_threshold)
    if len(X) == 0:
        raise EmptyClientError(f"client {client_id} has no training samples")
    model = KeypointTransformer(model_cfg, copy_params(w_global))
    opt = OptimizerState(lr=config.lr, kind=config.optimizer)
    rng = keyed_rng(config.seed, LOCAL_STREAM, round_idx, client_id)
    losses: list[float] = []
    acc = AttentionAccumulator()
    for epoch in range(config.local_epochs):
        last = epoch == config.local_epochs - 1
        losses += train_epoch(model, opt, X, y, config.batch_size, rng, config.shuffle,
                              acc if last else None)
    stats = acc.result() if acc.samples_seen else _eval_stats(model, X)
    return LocalResult(client_id, model.params, stats, losses, len(X))


# --------------------------------------------------------------------------
# selection


@dataclass
class TransmissionPacket:
    client_id: int
    round: int
    tensors: dict[str, np.ndarray]
    # partially sent parameters: name -> (row indices, rows)
    rows: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    n_samples: int = 1
    importance: AttentionStats | None = None
    param_count: int = field(init=False)

    def __post_init__(self):
        self.param_count = sum(int(v.size) for v in self.tensors.values()) + sum(
            int(vals.size) for _, vals in self.rows.values())

    @property
    def groups(self) -> list[str]:
        return sorted({group_of(n) for n in self.tensors} | {group_of(n) for n in self.rows})


def _top_indices(values: np.ndarray, k: int) -> np.ndarray:
    # descending importance, ties to the lower index
    return np.lexsort((np.arange(len(values)), -values))[:k]


def _concentration(values: np.ndarray, fraction: float) -> float:
    """Mass of the top ``fraction`` entries relative to a uniform spread (1.0 = uniform)."""
    k = max(1, math.ceil(fraction * len(values)))
    return float(values[_top_indices(values, k)].sum() * len(values) / k)


def budget_plan(model_cfg: ModelConfig, stats: AttentionStats, budget_fraction: float,
                top_fraction: float = 0.5) -> tuple[list[str], np.ndarray]:
    """Groups to send in full and ``pos_spatial`` rows to send, within the budget.

    Essential groups go first. Remaining groups are ranked by how concentrated
    the attention of their encoder is (keypoint importance for the spatial
    side, time importance for the temporal side), deeper blocks first, and
    added greedily while they fit. Leftover budget is filled with
    ``pos_spatial`` rows of the most important keypoints.
    """
    groups = param_groups(model_cfg)
    sizes = group_sizes(model_cfg)
    total = sum(sizes.values())
    budget = math.floor(budget_fraction * total)
    chosen = list(ESSENTIAL_GROUPS)
    used = sum(sizes[g] for g in chosen)
    spatial = _concentration(stats.keypoint_importance, top_fraction)
    temporal = _concentration(stats.time_importance, top_fraction)

    def key(item):
        index, g = item
        encoder_score = spatial if g.startswith("spatial.") else temporal
        depth = int(g.split(".")[1]) if "." in g else -1
        return (-encoder_score, -depth, index)

    candidates = [(i, g) for i, g in enumerate(groups)
                  if g not in ESSENTIAL_GROUPS and g != "pos_spatial"]
    for _, g in sorted(candidates, key=key):
        if used + sizes[g] <= budget:
            chosen.append(g)
            used += sizes[g]
    rows = []
    for j in _top_indices(stats.keypoint_importance, model_cfg.n_keypoints):
        if used + model_cfg.d_model > budget:
            break
        rows.append(int(j))
        used += model_cfg.d_model
    order = {g: i for i, g in enumerate(groups)}
    return sorted(chosen, key=order.__getitem__), np.array(sorted(rows), dtype=np.intp)


def select_for_transmission(w_local: dict, stats: AttentionStats, round_idx: int,
                            config: FedConfig, model_cfg: ModelConfig, client_id: int = 0,
                            n_samples: int = 1) -> TransmissionPacket:
    """Pick the parameter subset a client uploads this round."""
    groups = param_groups(model_cfg)
    policy = config.selection_policy
    if round_idx <= config.warmup_rounds or policy == "all":
        full = list(groups)
        rows = None
    elif policy == "keypoint_rows":
        full = [g for g in groups if g != "pos_spatial"]
        k = math.ceil(config.importance_top_fraction * model_cfg.n_keypoints)
        rows = np.sort(_top_indices(stats.keypoint_importance, k))
    else:
        full, rows = budget_plan(model_cfg, stats, config.budget_fraction,
                                 config.importance_top_fraction)
    tensors = {name: w_local[name] for g in full for name in groups[g]}
    partial = {}
    if rows is not None and len(rows):
        if len(rows) == model_cfg.n_keypoints:
            tensors["pos_spatial"] = w_local["pos_spatial"]
        else:
            partial["pos_spatial"] = (rows, w_local["pos_spatial"][rows])
    tensors = {n: tensors[n] for n in w_local if n in tensors}
    return TransmissionPacket(client_id, round_idx, tensors, partial, n_samples, stats)


# --------------------------------------------------------------------------
# aggregation


class AggregationError(ValueError):
    pass


def aggregate(packets: Sequence[TransmissionPacket], w_prev: dict, config: FedConfig) -> dict:
    """Average each scalar over the packets that carry it; keep ``w_prev`` elsewhere.

    Packets are reduced in client-id order so the result is independent of
    arrival order.
    """
    if not packets:
        raise AggregationError("no packets to aggregate")
    packets = sorted(packets, key=lambda p: p.client_id)
    weighted = config.aggregation == "weighted"
    out = {}
    for name, prev in w_prev.items():
        total = None
        cover = None
        for p in packets:
            w = float(p.n_samples) if weighted else 1.0
            if name in p.tensors:
                value = p.tensors[name]
                if value.shape != prev.shape:
                    raise AggregationError(
                        f"client {p.client_id}: {name} has shape {value.shape}, expected {prev.shape}")
                if total is None:
                    total, cover = np.zeros_like(prev), np.zeros_like(prev)
                total += w * value if weighted else value
                cover += w
            elif name in p.rows:
                idx, vals = p.rows[name]
                if vals.shape != (len(idx),) + prev.shape[1:] or (len(idx) and idx.max() >= len(prev)):
                    raise AggregationError(f"client {p.client_id}: bad rows for {name}")
                if total is None:
                    total, cover = np.zeros_like(prev), np.zeros_like(prev)
                total[idx] += w * vals if weighted else vals
                cover[idx] += w
        if total is None:
            out[name] = prev.copy()
        else:
            covered = cover > 0
            new = prev.copy()
            new[covered] = total[covered] / cover[covered]
            out[name] = new
    return out


# --------------------------------------------------------------------------
# evaluation and reporting


@dataclass
class RoundReport:
    round: int
    transmitted_params: int
    cumulative_params: int
    participants: int
    metrics: MetricReport | None = None
    confusion: ConfusionMatrix | None = None

    def log_record(self, algo: str) -> dict:
        m = self.metrics
        return {
            "round": self.round,
            "test_accuracy": None if m is None else m.accuracy,
            "precision": None if m is None else m.precision,
            "recall": None if m is None else m.recall,
            "f1": None if m is None else m.f1,
            "transmitted_params": self.transmitted_params,
            "cumulative_params": self.cumulative_params,
            "participants": self.participants,
            "algo": algo,
        }


@dataclass
class GlobalState:
    round: int
    params: dict[str, np.ndarray]
    ledger: list[int] = field(default_factory=list)
    history: list[RoundReport] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    @property
    def cumulative_params(self) -> int:
        return sum(self.ledger)


def evaluate_params(params: dict, model_cfg: ModelConfig, X, y):
    model = KeypointTransformer(model_cfg, params)
    cm = confusion(y, model.predict(np.asarray(X, dtype=model_cfg.np_dtype)), model_cfg.n_classes)
    return report(cm), cm


def _prepare_test(test, model_cfg, threshold):
    if test is None:
        return None
    if isinstance(test, tuple):
        X, y = test
    else:
        X, y = to_arrays(list(test), model_cfg.seq_len, threshold)
    return (np.asarray(X, dtype=model_cfg.np_dtype), np.asarray(y)) if len(y) else None


class _RunLog:
    def __init__(self, path, algo):
        self.algo = algo
        self.fh = open(path, "w", encoding="utf-8", newline="\n") if path else None

    def write(self, rep: RoundReport):
        if self.fh:
            self.fh.write(json.dumps(rep.log_record(self.algo)) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _progress(prefix, rep: RoundReport):
    acc = "n/a" if rep.metrics is None else f"{rep.metrics.accuracy:.2f}%"
    log.info("%s %d: acc=%s sent=%d cumulative=%d", prefix, rep.round, acc,
             rep.transmitted_params, rep.cumulative_params)


def run_federated(config: FedConfig, clients: Sequence, model_cfg: ModelConfig,
                  test=None, init=None, parallel: int = 1, log_path=None,
                  checkpoint_dir=None, algo: str = "flame") -> GlobalState:
    """Broadcast, train locally, select, aggregate and evaluate for ``config.rounds`` rounds."""
    params = init_params(model_cfg, config.seed) if init is None else copy_params(init)
    prepared = [_arrays(c, model_cfg, config.confidence_threshold) for c in clients]
    test_xy = _prepare_test(test, model_cfg, config.confidence_threshold)
    state = GlobalState(0, params)
    run_log = _RunLog(log_path, algo)
    n_clients = len(prepared)
    try:
        for t in range(1, config.rounds + 1):
            active = list(range(n_clients))
            if config.participation < 1.0:
                n_active = max(1, math.ceil(config.participation * n_clients))
                active = sorted(keyed_rng(config.seed, PARTICIPATION_STREAM, t)
                                .choice(n_clients, n_active, replace=False).tolist())
            jobs = []
            for i in active:
                cid, X, _ = prepared[i]
                if len(X) == 0:
                    state.events.append(f"round {t}: client {cid} skipped (no training samples)")
                    continue
                jobs.append(prepared[i])

            def work(c, t=t, w=state.params):
                return local_train(c, w, model_cfg, config, t)

            if parallel > 1 and len(jobs) > 1:
                with ThreadPoolExecutor(max_workers=parallel) as pool:
                    results = list(pool.map(work, jobs))
            else:
                results = [work(c) for c in jobs]

            packets = [select_for_transmission(r.params, r.stats, t, config, model_cfg,
                                               r.client_id, r.n_samples) for r in results]
            sent = sum(p.param_count for p in packets)
            if packets:
                state.params = aggregate(packets, state.params, config)
            else:
                state.events.append(f"round {t}: no client updates")
            state.ledger.append(sent)
            state.round = t
            rep = RoundReport(t, sent, state.cumulative_params, len(packets))
            if test_xy is not None:
                rep.metrics, rep.confusion = evaluate_params(state.params, model_cfg, *test_xy)
            state.history.append(rep)
            run_log.write(rep)
            _progress("round", rep)
            if checkpoint_dir and config.checkpoint_every and t % config.checkpoint_every == 0:
                checkpoint.save(Path(checkpoint_dir) / f"round_{t:04d}.flam", state.params)
    finally:
        run_log.close()
    return state


def run_centralized(train, model_cfg: ModelConfig, epochs: int, config: FedConfig = FedConfig(),
                    test=None, init=None, log_path=None) -> GlobalState:
    """Single-site training on pooled data with the same epoch loop clients use."""
    params = init_params(model_cfg, config.seed) if init is None else copy_params(init)
    if isinstance(train, tuple):
        X, y = train
        X = np.asarray(X, dtype=model_cfg.np_dtype)
    else:
        _, X, y = _arrays(ClientDataset(0, list(train)), model_cfg, config.confidence_threshold)
    test_xy = _prepare_test(test, model_cfg, config.confidence_threshold)
    model = KeypointTransformer(model_cfg, params)
    opt = OptimizerState(lr=config.lr, kind=config.optimizer)
    state = GlobalState(0, model.params)
    run_log = _RunLog(log_path, "centralized")
    try:
        for e in range(1, epochs + 1):
            rng = keyed_rng(config.seed, CENTRAL_STREAM, e)
            train_epoch(model, opt, X, y, config.batch_size, rng, config.shuffle)
            state.params = model.params
            state.round = e
            rep = RoundReport(e, 0, 0, 0)
            if test_xy is not None:
                rep.metrics, rep.confusion = evaluate_params(state.params, model_cfg, *test_xy)
            state.history.append(rep)
            run_log.write(rep)
            _progress("epoch", rep)
    finally:
        run_log.close()
    return state


def total_parameters(model_cfg: ModelConfig) -> int:
    return sum(group_sizes(model_cfg).values())
